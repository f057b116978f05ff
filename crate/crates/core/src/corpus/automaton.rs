//! Suffix automaton over u32 symbols.
//!
//! Built online, one symbol at a time. Transitions live in ordered maps so
//! construction and traversal order are deterministic. Each state records
//! the end position of the first occurrence of its strings, which is what
//! turns a match length into a corpus witness.

use std::collections::BTreeMap;

#[derive(Clone, Debug)]
struct State {
    len: u32,
    link: i32,
    next: BTreeMap<u32, u32>,
    /// Position (in the appended sequence) of the last symbol of the first
    /// occurrence of this state's strings.
    first_end: u32,
}

#[derive(Clone, Debug)]
pub struct SuffixAutomaton {
    states: Vec<State>,
    last: usize,
    appended: usize,
}

impl Default for SuffixAutomaton {
    fn default() -> Self {
        Self::new()
    }
}

impl SuffixAutomaton {
    pub fn new() -> Self {
        SuffixAutomaton {
            states: vec![State {
                len: 0,
                link: -1,
                next: BTreeMap::new(),
                first_end: 0,
            }],
            last: 0,
            appended: 0,
        }
    }

    pub fn from_symbols(symbols: &[u32]) -> Self {
        let mut sa = SuffixAutomaton::new();
        for &c in symbols {
            sa.extend(c);
        }
        sa
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn appended_len(&self) -> usize {
        self.appended
    }

    pub fn extend(&mut self, c: u32) {
        let pos = self.appended as u32;
        self.appended += 1;
        let cur = self.states.len();
        self.states.push(State {
            len: self.states[self.last].len + 1,
            link: -1,
            next: BTreeMap::new(),
            first_end: pos,
        });
        let mut p = self.last as i32;
        while p >= 0 && !self.states[p as usize].next.contains_key(&c) {
            self.states[p as usize].next.insert(c, cur as u32);
            p = self.states[p as usize].link;
        }
        if p < 0 {
            self.states[cur].link = 0;
        } else {
            let q = self.states[p as usize].next[&c] as usize;
            if self.states[p as usize].len + 1 == self.states[q].len {
                self.states[cur].link = q as i32;
            } else {
                let clone = self.states.len();
                let mut cl = self.states[q].clone();
                cl.len = self.states[p as usize].len + 1;
                // The clone's strings occur wherever q's do.
                self.states.push(cl);
                while p >= 0 && self.states[p as usize].next.get(&c) == Some(&(q as u32)) {
                    self.states[p as usize].next.insert(c, clone as u32);
                    p = self.states[p as usize].link;
                }
                self.states[q].link = clone as i32;
                self.states[cur].link = clone as i32;
            }
        }
        self.last = cur;
    }

    /// Whether `query` occurs as a contiguous run of the appended symbols.
    pub fn contains(&self, query: &[u32]) -> bool {
        let mut v = 0usize;
        for c in query {
            match self.states[v].next.get(c) {
                Some(&nxt) => v = nxt as usize,
                None => return false,
            }
        }
        true
    }

    /// Number of distinct non-empty substrings of the appended sequence.
    pub fn distinct_substrings(&self) -> u64 {
        let mut total = 0u64;
        for (i, st) in self.states.iter().enumerate() {
            if i == 0 {
                continue;
            }
            let link_len = if st.link < 0 {
                0
            } else {
                self.states[st.link as usize].len
            };
            total += (st.len - link_len) as u64;
        }
        total
    }

    /// Longest contiguous run shared by `query` and the appended sequence.
    /// Returns (length, end position of the first occurrence in the
    /// appended sequence). Length 0 has no meaningful position.
    pub fn longest_common_run(&self, query: &[u32]) -> (usize, usize) {
        let mut v = 0usize;
        let mut l = 0usize;
        let mut best = 0usize;
        let mut best_end = 0usize;
        for &c in query {
            while v != 0 && !self.states[v].next.contains_key(&c) {
                v = self.states[v].link as usize;
                l = self.states[v].len as usize;
            }
            if let Some(&nxt) = self.states[v].next.get(&c) {
                v = nxt as usize;
                l += 1;
            } else {
                v = 0;
                l = 0;
            }
            if l > best {
                best = l;
                best_end = self.states[v].first_end as usize;
            }
        }
        (best, best_end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ab_ab_has_seven_distinct_substrings() {
        // a b a b over symbols {0, 1}.
        let sa = SuffixAutomaton::from_symbols(&[0, 1, 0, 1]);
        assert_eq!(sa.distinct_substrings(), 7);
    }

    #[test]
    fn accepts_exactly_the_substrings() {
        let s = [0u32, 1, 0, 1];
        let sa = SuffixAutomaton::from_symbols(&s);
        // Enumerate every candidate over the alphabet up to length 5 and
        // compare against naive containment in the source string.
        let mut stack: Vec<Vec<u32>> = vec![vec![]];
        while let Some(cand) = stack.pop() {
            if !cand.is_empty() {
                let naive = s.windows(cand.len()).any(|w| w == cand.as_slice());
                assert_eq!(sa.contains(&cand), naive, "{cand:?}");
            }
            if cand.len() < 5 {
                for c in 0..2u32 {
                    let mut nxt = cand.clone();
                    nxt.push(c);
                    stack.push(nxt);
                }
            }
        }
    }

    #[test]
    fn single_symbol_has_two_states() {
        let sa = SuffixAutomaton::from_symbols(&[7]);
        assert_eq!(sa.state_count(), 2);
        assert!(sa.contains(&[7]));
        assert!(!sa.contains(&[8]));
    }

    #[test]
    fn state_count_stays_within_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100);
        let n = 10_000;
        let symbols: Vec<u32> = (0..n).map(|_| rng.random_range(0..4u32)).collect();
        let sa = SuffixAutomaton::from_symbols(&symbols);
        assert!(sa.state_count() <= (2 * n - 1).max(2), "{}", sa.state_count());
    }

    #[test]
    fn longest_common_run_hand_cases() {
        let sa = SuffixAutomaton::from_symbols(&[10, 11, 12, 13]);
        assert_eq!(sa.longest_common_run(&[10, 11, 12, 13]).0, 4);
        assert_eq!(sa.longest_common_run(&[99, 11, 12, 98]).0, 2);
        assert_eq!(sa.longest_common_run(&[40, 41]).0, 0);
    }

    #[test]
    fn first_end_positions_identify_first_occurrence() {
        // 5 6 5 6 7: the run 5 6 first ends at position 1.
        let sa = SuffixAutomaton::from_symbols(&[5, 6, 5, 6, 7]);
        let (len, end) = sa.longest_common_run(&[5, 6]);
        assert_eq!(len, 2);
        assert_eq!(end, 1);
        let (len, end) = sa.longest_common_run(&[6, 7]);
        assert_eq!(len, 2);
        assert_eq!(end, 4);
    }

    #[test]
    fn rebuild_is_structurally_identical() {
        let symbols = [3u32, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5];
        let a = SuffixAutomaton::from_symbols(&symbols);
        let b = SuffixAutomaton::from_symbols(&symbols);
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }
}
