//! Minimal fixed-priority selector over the manager's branches.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Emergency,
    Replan,
    Dispatch,
    Operator,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Emergency => "emergency",
            Branch::Replan => "feasibility",
            Branch::Dispatch => "dispatch",
            Branch::Operator => "operator",
        }
    }
}

/// Ticks children in order and stops at the first one that succeeds.
pub struct Selector {
    children: Vec<Branch>,
}

impl Selector {
    pub fn new(children: Vec<Branch>) -> Self {
        Selector { children }
    }

    /// Returns the branch that fired, if any.
    pub fn run(&self, mut tick: impl FnMut(Branch) -> bool) -> Option<Branch> {
        self.children.iter().copied().find(|&b| tick(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_success_wins() {
        let sel = Selector::new(vec![Branch::Emergency, Branch::Replan, Branch::Dispatch]);
        let mut seen = Vec::new();
        let fired = sel.run(|b| {
            seen.push(b);
            b == Branch::Replan
        });
        assert_eq!(fired, Some(Branch::Replan));
        assert_eq!(seen, vec![Branch::Emergency, Branch::Replan]);
        assert_eq!(sel.run(|_| false), None);
    }
}
