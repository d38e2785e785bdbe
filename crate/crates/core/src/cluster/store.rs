//! Thinned post-burn-in snapshots and the burn-in rule.

use crate::model::ChainState;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub round: u64,
    pub state: ChainState,
}

/// Per-chain snapshots. Stored states are deep copies and are only handed
/// out by shared reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleStore {
    chains: Vec<Vec<Snapshot>>,
    burn_in_round: Option<u64>,
}

impl SampleStore {
    pub fn new(chains: usize) -> Self {
        SampleStore {
            chains: vec![Vec::new(); chains],
            burn_in_round: None,
        }
    }

    pub fn chain_count(&self) -> usize {
        self.chains.len()
    }

    pub fn burn_in_complete(&self) -> bool {
        self.burn_in_round.is_some()
    }

    /// Round at which burn-in was declared.
    pub fn burn_in_round(&self) -> Option<u64> {
        self.burn_in_round
    }

    /// Latches burn-in; later calls keep the first round.
    pub fn mark_burn_in(&mut self, round: u64) {
        self.burn_in_round.get_or_insert(round);
    }

    /// Records a copy of `state` when burn-in is complete and
    /// `round ≡ 0 (mod thin)`. Returns whether a snapshot was taken.
    pub fn collect_sample(
        &mut self,
        chain: usize,
        state: &ChainState,
        round: u64,
        thin: u64,
    ) -> bool {
        if !self.burn_in_complete() || thin == 0 || !round.is_multiple_of(thin) {
            return false;
        }
        if chain >= self.chains.len() {
            self.chains.resize(chain + 1, Vec::new());
        }
        self.chains[chain].push(Snapshot {
            round,
            state: state.clone(),
        });
        true
    }

    pub fn snapshots(&self, chain: usize) -> &[Snapshot] {
        self.chains.get(chain).map_or(&[], Vec::as_slice)
    }

    /// All snapshots, chain by chain.
    pub fn iter(&self) -> impl Iterator<Item = &Snapshot> {
        self.chains.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Canonical little-endian byte dump, for reproducibility checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let idx = |out: &mut Vec<u8>, x: u64| out.extend_from_slice(&x.to_le_bytes());
        idx(&mut out, self.chains.len() as u64);
        idx(&mut out, self.burn_in_round.unwrap_or(u64::MAX));
        for chain in &self.chains {
            idx(&mut out, chain.len() as u64);
            for snap in chain {
                let s = &snap.state;
                idx(&mut out, snap.round);
                idx(&mut out, s.chain_id as u64);
                idx(&mut out, s.iteration);
                idx(&mut out, s.n_users() as u64);
                idx(&mut out, s.n_items() as u64);
                idx(&mut out, s.dim() as u64);
                let reals =
                    s.u.as_slice()
                        .iter()
                        .chain(s.v.as_slice())
                        .chain(&s.a)
                        .chain(&s.b)
                        .chain(&s.lambda_u)
                        .chain(&s.lambda_v)
                        .chain([&s.lambda_a, &s.lambda_b]);
                for x in reals {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }
}

/// True when the mean of the per-chain RMSEs is at most `threshold`, up to
/// a few ulps of rounding in the mean (always true for an infinite threshold).
pub fn check_burn_in(rmses: &[f64], threshold: f64) -> bool {
    if threshold == f64::INFINITY {
        return true;
    }
    if rmses.is_empty() {
        return false;
    }
    let mean = rmses.iter().sum::<f64>() / rmses.len() as f64;
    mean <= threshold + 4.0 * f64::EPSILON * threshold.abs()
}

/// Latching form of [`check_burn_in`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurnInDetector {
    pub threshold: f64,
    latched: bool,
}

impl BurnInDetector {
    pub fn new(threshold: f64) -> Self {
        BurnInDetector {
            threshold,
            latched: false,
        }
    }

    pub fn observe(&mut self, rmses: &[f64]) -> bool {
        if !self.latched {
            self.latched = check_burn_in(rmses, self.threshold);
        }
        self.latched
    }

    pub fn is_latched(&self) -> bool {
        self.latched
    }
}
