use super::{ensure_nonempty, EvalPair};
use crate::error::Result;

/// Longest common subsequence length, one rolling row.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1 (β = 1) for one pair; 0 if either side is empty.
pub fn rouge_l_pair(hyp: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean of per-pair ROUGE-L F1.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    ensure_nonempty(pairs, "rouge_l")?;
    Ok(pairs
        .iter()
        .map(|p| rouge_l_pair(&p.hypothesis, &p.reference))
        .sum::<f64>()
        / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::normalize;
    use proptest::prelude::*;

    fn full_table_lcs(a: &[String], b: &[String]) -> usize {
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                t[i][j] = if a[i - 1] == b[j - 1] {
                    t[i - 1][j - 1] + 1
                } else {
                    t[i - 1][j].max(t[i][j - 1])
                };
            }
        }
        t[a.len()][b.len()]
    }

    #[test]
    fn swapped_middle_is_three_quarters() {
        let f = rouge_l_pair(&normalize("a b c d"), &normalize("a c b d"));
        assert!((f - 0.75).abs() < 1e-9);
    }

    #[test]
    fn identity_disjoint_empty() {
        let t = normalize("mass in the right upper lobe");
        assert_eq!(rouge_l_pair(&t, &t), 1.0);
        assert_eq!(rouge_l_pair(&t, &normalize("no finding")), 0.0);
        assert_eq!(rouge_l_pair(&[], &t), 0.0);
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..=12)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn matches_full_table_oracle(a in words(), b in words()) {
            let l = full_table_lcs(&a, &b);
            prop_assert_eq!(lcs_len(&a, &b), l);
            let f = rouge_l_pair(&a, &b);
            let want = if l == 0 { 0.0 } else {
                let (p, r) = (l as f64 / a.len() as f64, l as f64 / b.len() as f64);
                2.0 * p * r / (p + r)
            };
            prop_assert_eq!(f.to_bits(), want.to_bits());
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
