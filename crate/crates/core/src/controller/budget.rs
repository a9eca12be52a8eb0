use serde::{Deserialize, Serialize};

pub const DEFAULT_PLAN_MAX_TOKENS: usize = 256;
pub const DEFAULT_FOCUS_MAX_TOKENS: usize = 192;
pub const DEFAULT_MAX_CYCLES: usize = 12;
pub const DEFAULT_ANSWER_MAX_TOKENS: usize = 256;

/// Token and cycle caps for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub plan_max_tokens: usize,
    pub focus_max_tokens: usize,
    pub max_cycles: usize,
    /// Safety net over every generated token, injected ones included.
    pub total_token_cap: usize,
    /// Tokens allowed for the summary and answer once the plan/focus loop
    /// has ended.
    pub answer_max_tokens: usize,
}

impl BudgetConfig {
    /// Caps with the total derived as `plan * cycles + focus * cycles + 512`.
    pub fn new(plan_max_tokens: usize, focus_max_tokens: usize, max_cycles: usize) -> Self {
        Self {
            plan_max_tokens,
            focus_max_tokens,
            max_cycles,
            total_token_cap: plan_max_tokens * max_cycles + focus_max_tokens * max_cycles + 512,
            answer_max_tokens: DEFAULT_ANSWER_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("plan_max_tokens", self.plan_max_tokens),
            ("focus_max_tokens", self.focus_max_tokens),
            ("max_cycles", self.max_cycles),
            ("total_token_cap", self.total_token_cap),
            ("answer_max_tokens", self.answer_max_tokens),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self::new(DEFAULT_PLAN_MAX_TOKENS, DEFAULT_FOCUS_MAX_TOKENS, DEFAULT_MAX_CYCLES)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    AnswerEmitted,
    EndDirective,
    BudgetExhausted,
    GrammarError,
    /// The token source ran dry (scripted policies only).
    EndOfStream,
}

impl TerminationReason {
    pub fn name(self) -> &'static str {
        match self {
            TerminationReason::AnswerEmitted => "answer_emitted",
            TerminationReason::EndDirective => "end_directive",
            TerminationReason::BudgetExhausted => "budget_exhausted",
            TerminationReason::GrammarError => "grammar_error",
            TerminationReason::EndOfStream => "end_of_stream",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BudgetState {
    pub tokens_in_current_block: usize,
    pub cycles_completed: usize,
    pub total_tokens: usize,
    pub terminated_reason: Option<TerminationReason>,
    pub forced_closures: usize,
    /// Largest generated-token count of any plan block.
    pub longest_plan: usize,
    pub longest_focus: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let b = BudgetConfig::default();
        assert_eq!((b.plan_max_tokens, b.focus_max_tokens, b.max_cycles), (256, 192, 12));
        assert_eq!(b.total_token_cap, 256 * 12 + 192 * 12 + 512);
        assert!(b.validate().is_ok());
        assert!(BudgetConfig::new(0, 1, 1).validate().is_err());
    }
}
