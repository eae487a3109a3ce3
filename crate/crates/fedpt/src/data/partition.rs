use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use crate::data::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

/// An assignment of every training example to exactly one device.
#[derive(Debug, Clone)]
pub struct DevicePartition {
    /// Per device: indices into `corpus.entries`, in assignment order.
    pub assignments: Vec<Vec<usize>>,
    /// Per device: category label -> sample count.
    pub histograms: Vec<BTreeMap<String, usize>>,
}

impl DevicePartition {
    fn from_assignments(corpus: &Corpus, assignments: Vec<Vec<usize>>) -> Self {
        let histograms = assignments
            .iter()
            .map(|shard| {
                let mut h = BTreeMap::new();
                for &i in shard {
                    *h.entry(corpus.entries[i].example.category.clone())
                        .or_default() += 1;
                }
                h
            })
            .collect();
        Self {
            assignments,
            histograms,
        }
    }

    pub fn num_devices(&self) -> usize {
        self.assignments.len()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Checks that the partition covers the training split exactly once.
    pub fn validate_against(&self, corpus: &Corpus) -> Result<()> {
        let train = corpus.split_indices(Split::Train);
        let mut seen = vec![false; corpus.entries.len()];
        for shard in &self.assignments {
            for &i in shard {
                if i >= corpus.entries.len() || corpus.entries[i].split != Split::Train {
                    return Err(Error::contract(format!(
                        "assigned index {i} is not a training example"
                    )));
                }
                if seen[i] {
                    return Err(Error::contract(format!("index {i} assigned twice")));
                }
                seen[i] = true;
            }
        }
        let assigned: usize = self.assignments.iter().map(Vec::len).sum();
        if assigned != train.len() {
            return Err(Error::contract(format!(
                "assigned {assigned} of {} training examples",
                train.len()
            )));
        }
        Ok(())
    }
}

fn train_by_category(corpus: &Corpus) -> Vec<(String, Vec<usize>)> {
    let mut by_cat: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, entry) in corpus.entries.iter().enumerate() {
        if entry.split == Split::Train {
            by_cat
                .entry(entry.example.category.clone())
                .or_default()
                .push(i);
        }
    }
    by_cat.into_iter().collect()
}

/// Splits the training set so that every device holds samples from exactly
/// two categories and shard sizes differ by at most one.
///
/// Procedure: shuffle within each category, lay the categories out in a
/// seeded order, cut the line into per-device quotas, then repair devices
/// whose cut spans one or three-plus categories by trading single samples
/// with other devices. Every step is deterministic in `seed`. Corpora whose
/// category structure cannot reach the exactly-two shape are rejected.
pub fn partition_pathological(
    corpus: &Corpus,
    num_devices: usize,
    seed: u64,
) -> Result<DevicePartition> {
    if num_devices == 0 {
        return Err(Error::input("num_devices must be positive"));
    }
    let mut by_cat = train_by_category(corpus);
    let total: usize = by_cat.iter().map(|(_, v)| v.len()).sum();
    if total == 0 {
        return Err(Error::input("training split is empty"));
    }
    if by_cat.len() < 2 {
        return Err(Error::input(
            "need at least two training categories for two-category shards",
        ));
    }
    if by_cat.len() > 2 * num_devices {
        return Err(Error::input(format!(
            "{} categories cannot all appear across {} devices holding two each",
            by_cat.len(),
            num_devices
        )));
    }
    if total < 2 * num_devices {
        return Err(Error::input(format!(
            "{total} training examples cannot give {num_devices} devices two categories each"
        )));
    }

    for (rank, (_, indices)) in by_cat.iter_mut().enumerate() {
        let mut rng = stream(seed, "pathological-cat", &[rank as u64]);
        indices.shuffle(&mut rng);
    }
    let mut order: Vec<usize> = (0..by_cat.len()).collect();
    let mut rng = stream(seed, "pathological-order", &[]);
    order.shuffle(&mut rng);

    let line: Vec<usize> = order
        .iter()
        .flat_map(|&c| by_cat[c].1.iter().copied())
        .collect();
    let base = total / num_devices;
    let extra = total % num_devices;
    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(num_devices);
    let mut cursor = 0;
    for d in 0..num_devices {
        let quota = base + usize::from(d < extra);
        assignments.push(line[cursor..cursor + quota].to_vec());
        cursor += quota;
    }

    repair_to_two_categories(corpus, &mut assignments)?;
    Ok(DevicePartition::from_assignments(corpus, assignments))
}

fn shard_histogram(corpus: &Corpus, shard: &[usize]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for &i in shard {
        *h.entry(corpus.entries[i].example.category.clone())
            .or_default() += 1;
    }
    h
}

/// Greedy repair: while some device holds a number of categories other than
/// two, apply the first sample-for-sample trade between two devices that
/// strictly reduces the total deviation from two. Trades preserve shard
/// sizes; the scan order and the traded samples are deterministic.
fn repair_to_two_categories(corpus: &Corpus, assignments: &mut [Vec<usize>]) -> Result<()> {
    let badness = |hists: &[BTreeMap<String, usize>]| -> usize {
        hists.iter().map(|h| h.len().abs_diff(2)).sum()
    };
    let mut hists: Vec<BTreeMap<String, usize>> = assignments
        .iter()
        .map(|s| shard_histogram(corpus, s))
        .collect();

    let mut current = badness(&hists);
    while current > 0 {
        let mut applied = false;
        'search: for d in 0..assignments.len() {
            if hists[d].len() == 2 {
                continue;
            }
            for e in 0..assignments.len() {
                if e == d {
                    continue;
                }
                let give: Vec<String> = hists[d].keys().cloned().collect();
                let take: Vec<String> = hists[e].keys().cloned().collect();
                for y in &give {
                    for x in &take {
                        if x == y {
                            continue;
                        }
                        let mut trial_d = hists[d].clone();
                        let mut trial_e = hists[e].clone();
                        decrement(&mut trial_d, y);
                        *trial_d.entry(x.clone()).or_default() += 1;
                        decrement(&mut trial_e, x);
                        *trial_e.entry(y.clone()).or_default() += 1;
                        let new = current - hists[d].len().abs_diff(2) - hists[e].len().abs_diff(2)
                            + trial_d.len().abs_diff(2)
                            + trial_e.len().abs_diff(2);
                        if new < current {
                            swap_samples(corpus, assignments, d, e, y, x);
                            hists[d] = trial_d;
                            hists[e] = trial_e;
                            current = new;
                            applied = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        if !applied {
            return Err(Error::input(
                "category layout cannot be repaired to two categories per device",
            ));
        }
    }
    Ok(())
}

fn decrement(h: &mut BTreeMap<String, usize>, key: &str) {
    if let Some(v) = h.get_mut(key) {
        *v -= 1;
        if *v == 0 {
            h.remove(key);
        }
    }
}

/// Moves one sample of category `y` from device `d` to `e` and one sample of
/// category `x` from `e` to `d`. The moved samples are the lowest corpus
/// indices of their categories on each side.
fn swap_samples(
    corpus: &Corpus,
    assignments: &mut [Vec<usize>],
    d: usize,
    e: usize,
    y: &str,
    x: &str,
) {
    let pick = |shard: &[usize], cat: &str| -> usize {
        shard
            .iter()
            .enumerate()
            .filter(|(_, &i)| corpus.entries[i].example.category == cat)
            .min_by_key(|(_, &i)| i)
            .map(|(pos, _)| pos)
            .expect("trade source category present")
    };
    let pos_d = pick(&assignments[d], y);
    let sample_y = assignments[d].remove(pos_d);
    let pos_e = pick(&assignments[e], x);
    let sample_x = assignments[e].remove(pos_e);
    assignments[d].push(sample_x);
    assignments[e].push(sample_y);
}

/// Splits the training set with per-category device proportions drawn from a
/// symmetric Dirichlet distribution. Small concentrations give skewed,
/// heterogeneous shards; very large concentrations approach uniform shards.
pub fn partition_dirichlet(
    corpus: &Corpus,
    num_devices: usize,
    concentration: f64,
    seed: u64,
) -> Result<DevicePartition> {
    if num_devices == 0 {
        return Err(Error::input("num_devices must be positive"));
    }
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::input(format!(
            "concentration must be a positive finite number, got {concentration}"
        )));
    }
    let mut by_cat = train_by_category(corpus);
    if by_cat.iter().map(|(_, v)| v.len()).sum::<usize>() == 0 {
        return Err(Error::input("training split is empty"));
    }

    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); num_devices];
    for (rank, (_, indices)) in by_cat.iter_mut().enumerate() {
        let mut rng = stream(seed, "dirichlet-cat", &[rank as u64]);
        let weights = dirichlet_weights(&mut rng, num_devices, concentration);
        indices.shuffle(&mut rng);
        let counts = largest_remainder(&weights, indices.len());
        let mut cursor = 0;
        for (device, &count) in counts.iter().enumerate() {
            assignments[device].extend_from_slice(&indices[cursor..cursor + count]);
            cursor += count;
        }
    }
    Ok(DevicePartition::from_assignments(corpus, assignments))
}

/// Symmetric Dirichlet sample via normalized Gamma draws.
fn dirichlet_weights(rng: &mut Rng, n: usize, concentration: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(concentration, 1.0).expect("positive finite shape");
    let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return vec![1.0 / n as f64; n];
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Rounds fractional shares of `total` to integers that sum exactly to
/// `total`: floor everything, then hand out the remainder by descending
/// fractional part (ties to the lower index).
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(weights.len());
    let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
    let mut assigned = 0;
    for (i, &w) in weights.iter().enumerate() {
        let share = w * total as f64;
        let floor = share.floor() as usize;
        counts.push(floor);
        assigned += floor;
        fractions.push((i, share - floor as f64));
    }
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in fractions.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}
