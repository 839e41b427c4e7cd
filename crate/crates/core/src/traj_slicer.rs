//! Fixed-budget training slices from long multimodal rollouts.
//!
//! A trajectory is an optional system turn followed by turn-pairs, each an
//! environment-side turn (`user` or `tool`) and then an `assistant` turn. Slice
//! `k` collapses the first `k·interval` pairs into the prompt, replacing every
//! image with [`IMAGE_PLACEHOLDER`], and keeps the remaining turns intact as
//! the response.

use serde::{Deserialize, Serialize};

pub const IMAGE_PLACEHOLDER: &str = "<image collapsed>";
pub const MAX_TOOL_CALLS_PER_TURN: u32 = 10;
pub const DEFAULT_INTERVAL: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Item {
    Text { text: String },
    ImageRef { id: String },
}

impl Item {
    pub fn text(text: impl Into<String>) -> Self {
        Item::Text { text: text.into() }
    }

    pub fn image(id: impl Into<String>) -> Self {
        Item::ImageRef { id: id.into() }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Item::ImageRef { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub items: Vec<Item>,
    #[serde(default)]
    pub cached_logprob_present: bool,
    #[serde(default)]
    pub tool_call_count: u32,
}

impl Turn {
    pub fn new(role: Role, items: Vec<Item>) -> Self {
        Turn { role, items, cached_logprob_present: false, tool_call_count: 0 }
    }

    pub fn assistant(items: Vec<Item>, cached_logprob_present: bool, tool_call_count: u32) -> Self {
        Turn { role: Role::Assistant, items, cached_logprob_present, tool_call_count }
    }

    fn is_environment(&self) -> bool {
        matches!(self.role, Role::User | Role::Tool)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub turns: Vec<Turn>,
    pub episode_reward: f64,
}

impl Trajectory {
    fn has_system(&self) -> bool {
        self.turns.first().is_some_and(|t| t.role == Role::System)
    }

    /// Number of complete environment/assistant pairs after the system turn.
    pub fn pair_count(&self) -> usize {
        (self.turns.len() - usize::from(self.has_system())) / 2
    }

    pub fn validate(&self) -> Result<(), SliceError> {
        let offset = usize::from(self.has_system());
        for (index, turn) in self.turns.iter().enumerate() {
            let bad = |message: &str| SliceError::Turn { index, message: message.to_string() };
            if turn.role == Role::System && index != 0 {
                return Err(bad("system turns may only appear first"));
            }
            if turn.role != Role::Assistant && (turn.tool_call_count != 0 || turn.cached_logprob_present) {
                return Err(bad("only assistant turns carry tool calls or cached log-probabilities"));
            }
            if index >= offset {
                let env_side = (index - offset) % 2 == 0;
                if env_side && !turn.is_environment() {
                    return Err(bad("expected a user or tool turn"));
                }
                if !env_side && turn.role != Role::Assistant {
                    return Err(bad("expected an assistant turn"));
                }
            }
        }
        check_reward(self.episode_reward)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SliceError {
    #[error("turn {index}: {message}")]
    Turn { index: usize, message: String },
    #[error("reward {0} outside [0, 1]")]
    Reward(f64),
    #[error("interval must be at least 1")]
    ZeroInterval,
    #[error("budget must be positive")]
    ZeroBudget,
    #[error("the system turn alone needs {tokens} tokens, over the budget of {budget}")]
    SystemOverBudget { tokens: usize, budget: usize },
}

fn check_reward(reward: f64) -> Result<(), SliceError> {
    if (0.0..=1.0).contains(&reward) {
        Ok(())
    } else {
        Err(SliceError::Reward(reward))
    }
}

/// One message of a slice. `turn_index` points back into the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageView {
    pub turn_index: usize,
    pub role: Role,
    pub items: Vec<Item>,
    pub in_prompt: bool,
    pub cached_logprob_present: bool,
    pub tool_call_count: u32,
    pub loss: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overflow {
    pub tokens: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub collapsed_length: usize,
    pub messages: Vec<MessageView>,
    pub reward: f64,
    pub is_dummy: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overflow: Option<Overflow>,
}

impl Slice {
    pub fn prompt(&self) -> impl Iterator<Item = &MessageView> {
        self.messages.iter().filter(|m| m.in_prompt)
    }

    pub fn response(&self) -> impl Iterator<Item = &MessageView> {
        self.messages.iter().filter(|m| !m.in_prompt)
    }
}

/// Cuts `t` into slices at `collapsed_length = 0, interval, 2·interval, …`
/// while that length is below the pair count, so every slice keeps at least
/// one pair in its response. Slices whose counted tokens exceed `budget`
/// become dummies in place.
pub fn slice_trajectory<F>(t: &Trajectory, interval: usize, budget: usize, counter: F) -> Result<Vec<Slice>, SliceError>
where
    F: Fn(&MessageView) -> usize,
{
    if interval == 0 {
        return Err(SliceError::ZeroInterval);
    }
    if budget == 0 {
        return Err(SliceError::ZeroBudget);
    }
    t.validate()?;
    let offset = usize::from(t.has_system());
    if offset == 1 {
        let tokens = counter(&view(t, 0, false));
        if tokens > budget {
            return Err(SliceError::SystemOverBudget { tokens, budget });
        }
    }

    let pairs = t.pair_count();
    let mut slices = Vec::new();
    for collapsed_length in (0..pairs).step_by(interval) {
        let prompt_end = offset + 2 * collapsed_length;
        let messages: Vec<MessageView> = (0..t.turns.len())
            .map(|i| {
                let in_prompt = i < prompt_end;
                let mut message = view(t, i, in_prompt);
                if in_prompt && i >= offset {
                    collapse_images(&mut message.items);
                }
                message
            })
            .collect();
        let mut slice = Slice { collapsed_length, messages, reward: t.episode_reward, is_dummy: false, overflow: None };
        let tokens: usize = slice.messages.iter().map(&counter).sum();
        if tokens > budget {
            slice.is_dummy = true;
            slice.overflow = Some(Overflow { tokens, budget });
        }
        let flags = compute_loss_flags(&slice);
        for (message, flag) in slice.messages.iter_mut().zip(flags) {
            message.loss = flag;
        }
        slices.push(slice);
    }
    Ok(slices)
}

fn view(t: &Trajectory, index: usize, in_prompt: bool) -> MessageView {
    let turn = &t.turns[index];
    MessageView {
        turn_index: index,
        role: turn.role,
        items: turn.items.clone(),
        in_prompt,
        cached_logprob_present: turn.cached_logprob_present,
        tool_call_count: turn.tool_call_count,
        loss: false,
    }
}

fn collapse_images(items: &mut [Item]) {
    for item in items.iter_mut().filter(|i| i.is_image()) {
        *item = Item::text(IMAGE_PLACEHOLDER);
    }
}

/// Loss flags for each message of `s`. Only response-side assistant turns
/// with a cached log-probability and at most [`MAX_TOOL_CALLS_PER_TURN`] tool
/// calls are trained on. Dummy slices are all false.
pub fn compute_loss_flags(s: &Slice) -> Vec<bool> {
    s.messages
        .iter()
        .map(|m| {
            !s.is_dummy
                && !m.in_prompt
                && m.role == Role::Assistant
                && m.cached_logprob_present
                && m.tool_call_count <= MAX_TOOL_CALLS_PER_TURN
        })
        .collect()
}

/// Gives every slice the full episode reward.
pub fn attribute_reward(slices: &mut [Slice], episode_reward: f64) -> Result<(), SliceError> {
    check_reward(episode_reward)?;
    for slice in slices {
        slice.reward = episode_reward;
    }
    Ok(())
}

/// Token estimate: one token per `chars_per_token` characters of text, rounded
/// up, plus `image_tokens` per image.
pub fn proportional_counter(chars_per_token: usize, image_tokens: usize) -> impl Fn(&MessageView) -> usize {
    let per = chars_per_token.max(1);
    move |m: &MessageView| {
        m.items
            .iter()
            .map(|item| match item {
                Item::Text { text } => text.chars().count().div_ceil(per),
                Item::ImageRef { .. } => image_tokens,
            })
            .sum()
    }
}

/// One JSON object per line, each line newline-terminated.
pub fn to_jsonl(slices: &[Slice]) -> String {
    let mut out = String::new();
    for slice in slices {
        out.push_str(&serde_json::to_string(slice).expect("slices always serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn synthetic(pairs: usize, reward: f64) -> Trajectory {
        let mut turns = vec![Turn::new(Role::System, vec![Item::text("You operate a desktop.")])];
        for p in 0..pairs {
            let role = if p % 3 == 2 { Role::Tool } else { Role::User };
            turns.push(Turn::new(role, vec![Item::text(format!("step {p}")), Item::image(format!("shot-{p}"))]));
            turns.push(Turn::assistant(vec![Item::text(format!("click {p}"))], true, (p % 4) as u32));
        }
        Trajectory { turns, episode_reward: reward }
    }

    fn unbounded() -> impl Fn(&MessageView) -> usize {
        proportional_counter(4, 256)
    }

    fn image_ids(messages: &[&MessageView]) -> Vec<String> {
        messages
            .iter()
            .flat_map(|m| &m.items)
            .filter_map(|i| match i {
                Item::ImageRef { id } => Some(id.clone()),
                Item::Text { .. } => None,
            })
            .collect()
    }

    #[test]
    fn schedule_for_25_pairs() {
        let t = synthetic(25, 0.65);
        let slices = slice_trajectory(&t, 10, usize::MAX, unbounded()).unwrap();
        let lengths: Vec<usize> = slices.iter().map(|s| s.collapsed_length).collect();
        assert_eq!(lengths, vec![0, 10, 20]);
        assert!(slices.iter().all(|s| s.reward == 0.65 && !s.is_dummy));
    }

    #[test]
    fn exact_multiple_does_not_emit_an_empty_response() {
        let slices = slice_trajectory(&synthetic(20, 1.0), 10, usize::MAX, unbounded()).unwrap();
        assert_eq!(slices.iter().map(|s| s.collapsed_length).collect::<Vec<_>>(), vec![0, 10]);
        assert!(slice_trajectory(&synthetic(0, 1.0), 10, usize::MAX, unbounded()).unwrap().is_empty());
    }

    #[test]
    fn first_slice_is_the_raw_trajectory() {
        let t = synthetic(12, 1.0);
        let first = &slice_trajectory(&t, 10, usize::MAX, unbounded()).unwrap()[0];
        assert_eq!(first.collapsed_length, 0);
        assert_eq!(first.prompt().count(), 1);
        let raw: Vec<&Vec<Item>> = t.turns.iter().map(|t| &t.items).collect();
        let seen: Vec<&Vec<Item>> = first.messages.iter().map(|m| &m.items).collect();
        assert_eq!(raw, seen);
    }

    #[test]
    fn collapsed_prompts_use_placeholders() {
        let t = synthetic(25, 1.0);
        let slices = slice_trajectory(&t, 10, usize::MAX, unbounded()).unwrap();
        for slice in &slices[1..] {
            let prompt: Vec<&MessageView> = slice.prompt().collect();
            assert!(image_ids(&prompt).is_empty());
            let placeholders =
                prompt.iter().flat_map(|m| &m.items).filter(|i| **i == Item::text(IMAGE_PLACEHOLDER)).count();
            assert_eq!(placeholders, slice.collapsed_length);
            let response: Vec<&MessageView> = slice.response().collect();
            let expected: Vec<String> = (slice.collapsed_length..25).map(|p| format!("shot-{p}")).collect();
            assert_eq!(image_ids(&response), expected);
        }
    }

    #[test]
    fn loss_flag_rules() {
        let mut t = synthetic(3, 1.0);
        t.turns[2].tool_call_count = 11;
        t.turns[4].cached_logprob_present = false;
        t.turns[6].tool_call_count = 10;
        let slice = &slice_trajectory(&t, 1, usize::MAX, unbounded()).unwrap()[0];
        let flags: Vec<bool> = slice.messages.iter().map(|m| m.loss).collect();
        assert_eq!(flags, vec![false, false, false, false, false, false, true]);
        assert_eq!(compute_loss_flags(slice), flags);

        let later = &slice_trajectory(&synthetic(3, 1.0), 1, usize::MAX, unbounded()).unwrap()[2];
        // Assistant turns in the prompt portion are never trained on.
        assert!(later.prompt().all(|m| !m.loss));
        assert_eq!(later.messages.iter().filter(|m| m.loss).count(), 1);
    }

    #[test]
    fn overflow_makes_a_dummy_in_place() {
        let t = synthetic(25, 1.0);
        let counter = proportional_counter(1, 1000);
        let full = slice_trajectory(&t, 10, usize::MAX, &counter).unwrap();
        let sizes: Vec<usize> = full.iter().map(|s| s.messages.iter().map(&counter).sum()).collect();
        // Budget between the sizes of the second and the first slice.
        let budget = sizes[1];
        let slices = slice_trajectory(&t, 10, budget, &counter).unwrap();
        assert_eq!(slices.len(), 3);
        assert!(slices[0].is_dummy);
        assert_eq!(slices[0].overflow, Some(Overflow { tokens: sizes[0], budget }));
        assert!(slices[0].messages.iter().all(|m| !m.loss));
        assert_eq!(slices[0].reward, 1.0);
        assert_eq!(&slices[1..], &full[1..]);
    }

    #[test]
    fn preconditions() {
        let t = synthetic(3, 1.0);
        assert_eq!(slice_trajectory(&t, 0, 10, unbounded()), Err(SliceError::ZeroInterval));
        assert_eq!(slice_trajectory(&t, 1, 0, unbounded()), Err(SliceError::ZeroBudget));
        assert!(matches!(slice_trajectory(&t, 1, 2, unbounded()), Err(SliceError::SystemOverBudget { budget: 2, .. })));
        let mut bad = t.clone();
        bad.turns.swap(1, 2);
        assert!(matches!(slice_trajectory(&bad, 1, 100, unbounded()), Err(SliceError::Turn { index: 1, .. })));
        let mut late_system = t.clone();
        late_system.turns.push(Turn::new(Role::System, vec![]));
        assert!(slice_trajectory(&late_system, 1, 100, unbounded()).is_err());
        let mut user_calls = t.clone();
        user_calls.turns[1].tool_call_count = 1;
        assert!(slice_trajectory(&user_calls, 1, 100, unbounded()).is_err());
        let mut reward = t;
        reward.episode_reward = 1.5;
        assert_eq!(slice_trajectory(&reward, 1, 100, unbounded()), Err(SliceError::Reward(1.5)));
    }

    #[test]
    fn missing_system_turn_and_trailing_observation() {
        let mut t = synthetic(4, 0.0);
        t.turns.remove(0);
        t.turns.push(Turn::new(Role::User, vec![Item::image("final")]));
        let slices = slice_trajectory(&t, 2, usize::MAX, unbounded()).unwrap();
        assert_eq!(slices.len(), 2);
        assert_eq!(slices[1].prompt().count(), 4);
        assert_eq!(slices[1].response().last().unwrap().items, vec![Item::image("final")]);
    }

    #[test]
    fn reward_replication() {
        let mut slices = slice_trajectory(&synthetic(30, 0.0), 10, usize::MAX, unbounded()).unwrap();
        for reward in [1.0, 0.0, 0.65] {
            attribute_reward(&mut slices, reward).unwrap();
            assert!(slices.iter().all(|s| s.reward == reward));
        }
        assert_eq!(attribute_reward(&mut slices, -0.1), Err(SliceError::Reward(-0.1)));
    }

    #[test]
    fn jsonl_round_trip() {
        let slices = slice_trajectory(&synthetic(12, 0.5), 5, usize::MAX, unbounded()).unwrap();
        let text = to_jsonl(&slices);
        assert_eq!(text.lines().count(), slices.len());
        assert!(text.contains(r#"{"type":"image_ref","id":"shot-11"}"#));
        let back: Vec<Slice> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, slices);
    }

    fn trajectory() -> impl Strategy<Value = Trajectory> {
        let turn_pair = (any::<bool>(), 0u32..14, any::<bool>(), 0usize..3, "[a-z ]{0,40}");
        (prop::collection::vec(turn_pair, 0..40), 0.0f64..=1.0).prop_map(|(pairs, reward)| {
            let mut turns = vec![Turn::new(Role::System, vec![Item::text("sys")])];
            for (i, (tool, calls, cached, images, text)) in pairs.into_iter().enumerate() {
                let mut items = vec![Item::text(text.clone())];
                items.extend((0..images).map(|k| Item::image(format!("{i}-{k}"))));
                turns.push(Turn::new(if tool { Role::Tool } else { Role::User }, items));
                turns.push(Turn::assistant(vec![Item::text(text)], cached, calls));
            }
            Trajectory { turns, episode_reward: reward }
        })
    }

    proptest! {
        #[test]
        fn coverage_when_budget_suffices(t in trajectory(), interval in 1usize..12) {
            let slices = slice_trajectory(&t, interval, usize::MAX, unbounded()).unwrap();
            let mut covered: Vec<usize> = slices.iter().filter(|s| !s.is_dummy)
                .flat_map(|s| s.messages.iter().filter(|m| m.loss).map(|m| m.turn_index))
                .collect();
            covered.sort_unstable();
            covered.dedup();
            let eligible: Vec<usize> = t.turns.iter().enumerate()
                .filter(|(_, turn)| turn.role == Role::Assistant && turn.cached_logprob_present && turn.tool_call_count <= MAX_TOOL_CALLS_PER_TURN)
                .map(|(i, _)| i)
                .collect();
            prop_assert_eq!(covered, eligible);
        }

        #[test]
        fn deterministic_and_monotone(t in trajectory(), interval in 1usize..12, budget in 1usize..400) {
            let counter = proportional_counter(4, 30);
            let first = slice_trajectory(&t, interval, budget.max(1), &counter);
            let second = slice_trajectory(&t, interval, budget.max(1), &counter);
            prop_assert_eq!(&first, &second);
            if let Ok(slices) = first {
                prop_assert_eq!(to_jsonl(&slices), to_jsonl(&second.unwrap()));
                for pair in slices.windows(2) {
                    let a: Vec<&MessageView> = pair[0].prompt().collect();
                    let b: Vec<&MessageView> = pair[1].prompt().collect();
                    prop_assert!(a.len() < b.len());
                    prop_assert_eq!(&a[..], &b[..a.len()]);
                }
                for slice in &slices {
                    prop_assert_eq!(slice.reward, t.episode_reward);
                    if slice.is_dummy {
                        prop_assert!(slice.messages.iter().all(|m| !m.loss));
                    }
                }
            }
        }

        #[test]
        fn placeholder_fidelity(t in trajectory(), interval in 1usize..12) {
            let slices = slice_trajectory(&t, interval, usize::MAX, unbounded()).unwrap();
            for slice in &slices {
                let prompt: Vec<&MessageView> = slice.prompt().collect();
                prop_assert!(image_ids(&prompt).is_empty());
                let response: Vec<&MessageView> = slice.response().collect();
                let original: Vec<String> = t.turns[response.first().map_or(t.turns.len(), |m| m.turn_index)..]
                    .iter()
                    .flat_map(|turn| &turn.items)
                    .filter_map(|i| match i { Item::ImageRef { id } => Some(id.clone()), Item::Text { .. } => None })
                    .collect();
                prop_assert_eq!(image_ids(&response), original);
            }
        }
    }
}
