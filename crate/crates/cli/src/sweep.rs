//! Mask-ratio sweep report: one row per (ratio, seed) run plus per-ratio
//! means.

use std::fmt::Write as _;

pub const DEFAULT_RATIOS: [f64; 5] = [0.55, 0.65, 0.75, 0.85, 0.95];
pub const HEADER: &str = "ratio,seed,auc";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub seed: u64,
    pub auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

pub fn validate_ratios(ratios: &[f64]) -> Result<(), String> {
    if ratios.is_empty() {
        return Err("no mask ratios given".into());
    }
    match ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        Some(r) => Err(format!("mask ratio {r} is outside (0, 1)")),
        None => Ok(()),
    }
}

impl SweepReport {
    /// Mean AUC per ratio, in order of first appearance.
    pub fn means(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|m| m.0 == r.ratio) {
                Some(m) => {
                    m.1 += r.auc;
                    m.2 += 1;
                }
                None => out.push((r.ratio, r.auc, 1)),
            }
        }
        out.into_iter().map(|(r, s, n)| (r, s / n as f64)).collect()
    }

    /// Run rows first, then one `ratio,mean,auc` row per ratio.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.ratio, r.seed, r.auc);
        }
        for (ratio, auc) in self.means() {
            let _ = writeln!(s, "{ratio},mean,{auc}");
        }
        s
    }

    /// Reads the run rows back; mean rows are recomputed, not parsed.
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == HEADER => {}
            other => return Err(format!("expected header `{HEADER}`, got {other:?}")),
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(format!("line {}: expected 3 fields", i + 2));
            }
            if f[1] == "mean" {
                continue;
            }
            let bad = |what: &str| format!("line {}: bad {what}", i + 2);
            rows.push(SweepRow {
                ratio: f[0].parse().map_err(|_| bad("ratio"))?,
                seed: f[1].parse().map_err(|_| bad("seed"))?,
                auc: f[2].parse().map_err(|_| bad("auc"))?,
            });
        }
        Ok(Self { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_grid_gives_five_mean_rows() {
        let rows = DEFAULT_RATIOS
            .iter()
            .flat_map(|&ratio| (0..3).map(move |seed| SweepRow { ratio, seed, auc: 0.5 + ratio / 4.0 }))
            .collect();
        let csv = SweepReport { rows }.to_csv();
        assert_eq!(csv.lines().filter(|l| l.contains(",mean,")).count(), 5);
        assert_eq!(csv.lines().count(), 1 + 15 + 5);
    }

    #[test]
    fn single_run_has_one_row() {
        let rep = SweepReport {
            rows: vec![SweepRow { ratio: 0.75, seed: 4, auc: 0.875 }],
        };
        assert_eq!(rep.to_csv(), "ratio,seed,auc\n0.75,4,0.875\n0.75,mean,0.875\n");
    }

    #[test]
    fn ratios_outside_unit_interval_are_rejected() {
        assert!(validate_ratios(&DEFAULT_RATIOS).is_ok());
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(validate_ratios(&[0.5, bad]).is_err(), "{bad}");
        }
        assert!(validate_ratios(&[]).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_lossless(
            runs in prop::collection::vec((0.001f64..0.999, any::<u64>(), 0.0f64..=1.0), 1..20)
        ) {
            let rep = SweepReport {
                rows: runs.into_iter().map(|(ratio, seed, auc)| SweepRow { ratio, seed, auc }).collect(),
            };
            prop_assert_eq!(SweepReport::from_csv(&rep.to_csv()).unwrap(), rep);
        }
    }
}
