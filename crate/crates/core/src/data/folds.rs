//! Test split plus k folds, balanced on the rarest class.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub test: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
    /// Class used for stratification (least number of samples containing it).
    pub rarest_class: Option<u32>,
    pub warning: Option<String>,
}

/// `classes[i]` lists the instance classes of sample i. Samples containing
/// the rarest class and the rest are shuffled separately, the test split
/// takes a proportional share of each, and the remainder is dealt round-robin
/// (rarest-class samples first) so both fold sizes and rarest-class counts
/// differ by at most one.
pub fn split_folds(classes: &[Vec<u32>], folds: usize, test_fraction: f64, seed: u64) -> Result<FoldSplit> {
    let n = classes.len();
    if n == 0 {
        return Err(Error::Invalid("cannot split an empty dataset".into()));
    }
    if folds == 0 || !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config("need at least one fold and a test fraction in [0, 1)".into()));
    }
    let mut counts = std::collections::BTreeMap::<u32, usize>::new();
    for cs in classes {
        let mut seen: Vec<u32> = cs.clone();
        seen.sort_unstable();
        seen.dedup();
        for c in seen {
            *counts.entry(c).or_default() += 1;
        }
    }
    let rarest = counts.iter().min_by_key(|(&c, &k)| (k, c)).map(|(&c, _)| c);
    let (mut rare, mut rest): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| rarest.is_some_and(|r| classes[i].contains(&r)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rare.shuffle(&mut rng);
    rest.shuffle(&mut rng);

    let warning = (rare.len() < folds && rarest.is_some()).then(|| {
        let w = format!(
            "rarest class {} occurs in {} samples, fewer than {folds} folds; stratification is best-effort",
            rarest.unwrap_or(0),
            rare.len()
        );
        log::warn!("{w}");
        w
    });

    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut test_rare = ((rare.len() * n_test) as f64 / n as f64).round() as usize;
    test_rare = test_rare.min(rare.len()).max(n_test.saturating_sub(rest.len()));
    let test_rest = n_test - test_rare;
    let mut test: Vec<usize> = rare[..test_rare].iter().chain(&rest[..test_rest]).copied().collect();
    test.sort_unstable();

    let mut out = vec![Vec::new(); folds];
    for (k, &i) in rare[test_rare..].iter().chain(&rest[test_rest..]).enumerate() {
        out[k % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(FoldSplit {
        test,
        folds: out,
        rarest_class: rarest,
        warning,
    })
}
