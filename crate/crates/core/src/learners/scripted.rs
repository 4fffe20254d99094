//! Fixed behaviours that never learn: a static no-op and a uniform random policy.

use super::{Agent, ScriptedKind};
use crate::interface::{EntitySpec, SpaceSpec, Value};
use crate::seed::ArenaRng;

pub fn scripted_act(kind: ScriptedKind, space: &SpaceSpec, rng: &mut ArenaRng) -> Value {
    match kind {
        ScriptedKind::Static => space.null_action(),
        ScriptedKind::Random => space.sample(rng),
    }
}

pub struct ScriptedAgent {
    kind: ScriptedKind,
    spaces: Vec<SpaceSpec>,
}

impl ScriptedAgent {
    pub fn new(kind: ScriptedKind, specs: &[EntitySpec]) -> Self {
        ScriptedAgent { kind, spaces: specs.iter().map(|s| s.act_space.clone()).collect() }
    }
}

impl Agent for ScriptedAgent {
    fn act(&mut self, _obs: &[Value], rng: &mut ArenaRng) -> Vec<Value> {
        self.spaces.iter().map(|s| scripted_act(self.kind, s, rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn static_is_null_action() {
        let mut rng = seed::rng(&[0]);
        assert_eq!(scripted_act(ScriptedKind::Static, &SpaceSpec::boxed(&[2], -1.0, 1.0), &mut rng), Value::Real(vec![0.0, 0.0]));
    }

    #[test]
    fn random_is_in_space_and_reproducible() {
        let space = SpaceSpec::discrete(4);
        let draw = |s| {
            let mut rng = seed::rng(&[s]);
            (0..50).map(|_| scripted_act(ScriptedKind::Random, &space, &mut rng)).collect::<Vec<_>>()
        };
        let a = draw(1);
        assert!(a.iter().all(|v| space.contains(v)));
        assert_eq!(a, draw(1));
    }
}
