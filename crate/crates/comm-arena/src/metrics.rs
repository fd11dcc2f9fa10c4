//! Post-hoc analysis: curve smoothing, peak and cross-run statistics, and
//! the message-vs-target confusion matrix.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{PolicySet, PredatorPolicy};
use crate::env::{self, EnvConfig};
use crate::training::{rollout_episode, RunLog};
use crate::{Error, Result};

/// Smoothing constant used for reported reward curves.
pub const EWMA_ALPHA: f64 = 0.0005;

/// Exponentially weighted moving average, seeded at the first observation:
/// `s[0] = x[0]`, `s[t] = alpha * x[t] + (1 - alpha) * s[t-1]`.
pub fn ewma(series: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::InvalidCall("ewma of an empty series".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidCall(format!("alpha {alpha} outside (0, 1]")));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut s = series[0];
    out.push(s);
    for &x in &series[1..] {
        s = alpha * x + (1.0 - alpha) * s;
        out.push(s);
    }
    Ok(out)
}

fn check_contiguous(log: &RunLog) -> Result<()> {
    for (i, r) in log.iter().enumerate() {
        if r.epoch != i {
            return Err(Error::Parse(format!(
                "epoch indices not contiguous from 0: found {} at row {i}",
                r.epoch
            )));
        }
    }
    Ok(())
}

/// Best per-epoch mean predator reward of a run, on the raw (unsmoothed)
/// series.
pub fn peak_performance(log: &RunLog) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::InvalidCall("peak of an empty run log".into()));
    }
    check_contiguous(log)?;
    Ok(log
        .iter()
        .map(|r| r.mean_predator_reward)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Cross-run statistics for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    /// Mean over runs of the per-run mean epoch reward.
    pub average_reward: f64,
    /// Mean over epochs of the cross-run population standard deviation.
    pub average_std: f64,
    /// Mean over runs of each run's peak performance.
    pub average_peak: f64,
    /// Population standard deviation of the per-run peaks.
    pub peak_std: f64,
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Aggregates two or more equal-length run logs.
pub fn aggregate_runs(logs: &[RunLog]) -> Result<SummaryStats> {
    if logs.len() < 2 {
        return Err(Error::InvalidCall(format!(
            "aggregation needs at least 2 runs, got {}",
            logs.len()
        )));
    }
    let epochs = logs[0].len();
    if epochs == 0 {
        return Err(Error::InvalidCall("aggregation of empty run logs".into()));
    }
    for log in logs {
        if log.len() != epochs {
            return Err(Error::InvalidCall(format!(
                "run logs have mismatched lengths ({} vs {epochs})",
                log.len()
            )));
        }
        check_contiguous(log)?;
    }

    let run_means: Vec<f64> = logs
        .iter()
        .map(|log| log.iter().map(|r| r.mean_predator_reward).sum::<f64>() / epochs as f64)
        .collect();
    let average_reward = run_means.iter().sum::<f64>() / logs.len() as f64;

    let mut std_sum = 0.0;
    let mut column = vec![0.0; logs.len()];
    for e in 0..epochs {
        for (k, log) in logs.iter().enumerate() {
            column[k] = log[e].mean_predator_reward;
        }
        std_sum += population_std(&column);
    }
    let average_std = std_sum / epochs as f64;

    let peaks: Vec<f64> = logs
        .iter()
        .map(peak_performance)
        .collect::<Result<Vec<_>>>()?;
    let average_peak = peaks.iter().sum::<f64>() / peaks.len() as f64;
    let peak_std = population_std(&peaks);

    Ok(SummaryStats {
        average_reward,
        average_std,
        average_peak,
        peak_std,
    })
}

/// Message symbols against the target the message is about. Rows index the
/// *teammate's* assigned prey (what the sender was told to pass along);
/// columns index the thresholded message, `1` iff the value is > 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Fraction of messages explained by the better of the two possible
    /// symbol-to-target labelings; 0.5 is chance, 1.0 a perfect protocol.
    pub fn accuracy(&self) -> f64 {
        let direct = self.counts[0][0] + self.counts[1][1];
        let flipped = self.counts[0][1] + self.counts[1][0];
        direct.max(flipped) as f64 / self.total() as f64
    }
}

/// Discretized-message symbol: thresholded at zero.
pub fn message_symbol(message: f64) -> usize {
    usize::from(message > 0.0)
}

/// Rolls greedy episodes with trained communication policies and counts
/// (teammate target, message symbol) pairs. Both predators contribute one
/// message per step.
pub fn build_confusion_matrix(
    policies: &PolicySet,
    config: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<ConfusionMatrix> {
    if !config.mode.is_comm() || !matches!(policies.predators, PredatorPolicy::Comm { .. }) {
        return Err(Error::InvalidCall(
            "confusion matrix requires communication-mode checkpoints".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [[0u64; 2]; 2];
    for _ in 0..episodes {
        let rollout = rollout_episode(policies.view(), config, 0.0, 0, &mut rng)?;
        for tr in &rollout.transitions {
            let messages = tr.messages_t.expect("comm mode emits messages");
            for pred in env::PREDATORS {
                let about = rollout.targets[env::teammate(pred)];
                counts[about][message_symbol(messages[pred])] += 1;
            }
        }
    }
    Ok(ConfusionMatrix { counts })
}

/// Everything `summary.json` records for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub mode: String,
    pub runs: usize,
    pub epochs: usize,
    #[serde(flatten)]
    pub stats: SummaryStats,
    pub std_definition: String,
    pub peak_definition: String,
    pub training_notes: Vec<String>,
}

impl SummaryFile {
    pub fn new(mode: &str, runs: usize, epochs: usize, stats: SummaryStats) -> SummaryFile {
        SummaryFile {
            mode: mode.to_string(),
            runs,
            epochs,
            stats,
            std_definition:
                "population standard deviation across runs per epoch, averaged over epochs"
                    .to_string(),
            peak_definition: "max per-epoch mean predator reward of the raw series".to_string(),
            training_notes: vec![
                "optimizer: adam (beta1 0.9, beta2 0.999, eps 1e-8)".to_string(),
                "weight init: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], zero biases"
                    .to_string(),
            ],
        }
    }
}

pub fn write_summary_json<W: Write>(out: &mut W, summary: &SummaryFile) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, summary)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_confusion_csv<W: Write>(out: &mut W, matrix: &ConfusionMatrix) -> Result<()> {
    writeln!(out, "row,msg0,msg1")?;
    writeln!(out, "target0,{},{}", matrix.counts[0][0], matrix.counts[0][1])?;
    writeln!(out, "target1,{},{}", matrix.counts[1][0], matrix.counts[1][1])?;
    writeln!(out, "accuracy,{},", matrix.accuracy())?;
    Ok(())
}

/// Cross-run mean predator reward per epoch.
pub fn mean_curve(logs: &[RunLog]) -> Result<Vec<f64>> {
    if logs.is_empty() || logs[0].is_empty() {
        return Err(Error::InvalidCall("no runs to average".into()));
    }
    let epochs = logs[0].len();
    for log in logs {
        if log.len() != epochs {
            return Err(Error::InvalidCall("run logs have mismatched lengths".into()));
        }
    }
    Ok((0..epochs)
        .map(|e| logs.iter().map(|l| l[e].mean_predator_reward).sum::<f64>() / logs.len() as f64)
        .collect())
}

/// Writes `epoch,raw,smoothed` rows for the configuration's mean curve.
pub fn write_curves_csv<W: Write>(out: &mut W, raw: &[f64], smoothed: &[f64]) -> Result<()> {
    if raw.len() != smoothed.len() {
        return Err(Error::InvalidCall("raw/smoothed length mismatch".into()));
    }
    writeln!(out, "epoch,raw,smoothed")?;
    for (e, (r, s)) in raw.iter().zip(smoothed).enumerate() {
        writeln!(out, "{e},{r},{s}")?;
    }
    Ok(())
}

/// Minimal line plot of the raw and smoothed reward curves.
pub fn write_curves_svg<W: Write>(
    out: &mut W,
    label: &str,
    raw: &[f64],
    smoothed: &[f64],
) -> Result<()> {
    if raw.is_empty() || raw.len() != smoothed.len() {
        return Err(Error::InvalidCall("bad curve data for svg".into()));
    }
    const WIDTH: f64 = 800.0;
    const HEIGHT: f64 = 480.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 24.0;
    const BOTTOM: f64 = 48.0;
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;

    let y_min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((y_max - y_min) * 0.05).max(1e-9);
    let (y_lo, y_hi) = (y_min - pad, y_max + pad);
    let x_span = (raw.len().saturating_sub(1)).max(1) as f64;

    let x_of = |i: usize| LEFT + plot_w * i as f64 / x_span;
    let y_of = |v: f64| TOP + plot_h * (1.0 - (v - y_lo) / (y_hi - y_lo));
    let polyline = |series: &[f64]| {
        series
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_of(i), y_of(v)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">"
    )?;
    writeln!(
        out,
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    )?;
    // axes
    writeln!(
        out,
        "  <line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{}\" stroke=\"black\"/>",
        TOP + plot_h
    )?;
    writeln!(
        out,
        "  <line x1=\"{LEFT}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h
    )?;
    for k in 0..=4 {
        let frac = k as f64 / 4.0;
        let x = LEFT + plot_w * frac;
        let epoch = (x_span * frac).round() as usize;
        writeln!(
            out,
            "  <text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{epoch}</text>",
            TOP + plot_h + 18.0
        )?;
        let v = y_lo + (y_hi - y_lo) * frac;
        let y = y_of(v);
        writeln!(
            out,
            "  <text x=\"{}\" y=\"{y:.2}\" text-anchor=\"end\">{v:.1}</text>",
            LEFT - 6.0
        )?;
    }
    writeln!(
        out,
        "  <text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">epoch</text>",
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    )?;
    writeln!(
        out,
        "  <text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.2})\">mean predator reward</text>",
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    )?;
    writeln!(
        out,
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"#bbbbbb\" stroke-width=\"1\"/>",
        polyline(raw)
    )?;
    writeln!(
        out,
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"#3366aa\" stroke-width=\"2\"/>",
        polyline(smoothed)
    )?;
    // legend
    let lx = LEFT + plot_w - 220.0;
    writeln!(
        out,
        "  <line x1=\"{lx}\" y1=\"{TOP}\" x2=\"{}\" y2=\"{TOP}\" stroke=\"#bbbbbb\"/>",
        lx + 24.0
    )?;
    writeln!(
        out,
        "  <text x=\"{}\" y=\"{}\">{label} raw</text>",
        lx + 30.0,
        TOP + 4.0
    )?;
    writeln!(
        out,
        "  <line x1=\"{lx}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#3366aa\" stroke-width=\"2\"/>",
        TOP + 18.0,
        lx + 24.0,
        TOP + 18.0
    )?;
    writeln!(
        out,
        "  <text x=\"{}\" y=\"{}\">{label} smoothed (ewma {EWMA_ALPHA})</text>",
        lx + 30.0,
        TOP + 22.0
    )?;
    writeln!(out, "</svg>")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::CNet;
    use crate::diffnet::{Activation, DenseNet, Layer};
    use crate::env::Mode;
    use crate::training::EpochRecord;

    fn record(epoch: usize, reward: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            mean_predator_reward: reward,
            mean_prey_reward: -reward,
            epsilon: 0.05,
            dial_loss: None,
            iql_loss_prey: 0.0,
            iql_loss_pred: None,
        }
    }

    fn constant_log(reward: f64, epochs: usize) -> RunLog {
        (0..epochs).map(|e| record(e, reward)).collect()
    }

    #[test]
    fn ewma_follows_the_recurrence() {
        assert_eq!(ewma(&[0.0, 1.0], 0.5).unwrap(), vec![0.0, 0.5]);
    }

    #[test]
    fn ewma_fixes_constant_series() {
        let s = vec![2.5; 10];
        assert_eq!(ewma(&s, 0.25).unwrap(), s);
    }

    #[test]
    fn ewma_step_response_matches_closed_form() {
        let alpha = EWMA_ALPHA;
        let mut series = vec![0.0];
        series.extend(std::iter::repeat_n(1.0, 500));
        let smoothed = ewma(&series, alpha).unwrap();
        for (k, value) in smoothed.iter().enumerate() {
            let expect = 1.0 - (1.0 - alpha).powi(k as i32);
            assert!((value - expect).abs() < 1e-12, "k={k}: {value} vs {expect}");
        }
    }

    #[test]
    fn ewma_rejects_empty_series() {
        assert!(ewma(&[], 0.5).is_err());
    }

    #[test]
    fn ewma_stays_within_input_range() {
        let series = [3.0, -1.0, 4.0, -1.5, 2.0];
        let out = ewma(&series, 0.3).unwrap();
        for v in out {
            assert!((-1.5..=4.0).contains(&v));
        }
    }

    #[test]
    fn peak_takes_the_max() {
        let log = vec![record(0, -5.0), record(1, -3.0), record(2, -4.0)];
        assert_eq!(peak_performance(&log).unwrap(), -3.0);
    }

    #[test]
    fn peak_of_improving_log_is_the_last_value() {
        let log: RunLog = (0..10).map(|e| record(e, -10.0 + e as f64)).collect();
        assert_eq!(peak_performance(&log).unwrap(), -1.0);
    }

    #[test]
    fn peak_ignores_order_of_earlier_epochs() {
        let a = vec![record(0, -9.0), record(1, -7.0), record(2, -2.0)];
        let b = vec![record(0, -7.0), record(1, -9.0), record(2, -2.0)];
        assert_eq!(
            peak_performance(&a).unwrap(),
            peak_performance(&b).unwrap()
        );
    }

    #[test]
    fn peak_rejects_empty_and_gappy_logs() {
        assert!(peak_performance(&vec![]).is_err());
        let gappy = vec![record(0, -1.0), record(2, -1.0)];
        assert!(peak_performance(&gappy).is_err());
    }

    #[test]
    fn aggregate_matches_hand_computed_stats() {
        let logs = vec![
            constant_log(-10.0, 4),
            constant_log(-20.0, 4),
            constant_log(-30.0, 4),
        ];
        let stats = aggregate_runs(&logs).unwrap();
        assert_eq!(stats.average_reward, -20.0);
        assert!((stats.average_std - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(stats.average_peak, -20.0);
        assert!((stats.peak_std - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn aggregate_of_identical_logs_has_zero_std() {
        let logs = vec![constant_log(-7.0, 3), constant_log(-7.0, 3)];
        let stats = aggregate_runs(&logs).unwrap();
        assert_eq!(stats.average_std, 0.0);
        assert_eq!(stats.peak_std, 0.0);
    }

    #[test]
    fn aggregate_rejects_bad_inputs() {
        assert!(aggregate_runs(&[constant_log(-1.0, 3)]).is_err());
        let logs = vec![constant_log(-1.0, 3), constant_log(-1.0, 4)];
        assert!(aggregate_runs(&logs).is_err());
    }

    #[test]
    fn symbols_threshold_at_zero() {
        assert_eq!(message_symbol(0.0), 0);
        assert_eq!(message_symbol(0.3), 1);
        assert_eq!(message_symbol(1e-12), 1);
    }

    fn cnet_reading_one_hot() -> CNet {
        // message = 1 exactly when the teammate's target (slot 11) is prey 1
        let mut row = vec![0.0; 12];
        row[11] = 1.0;
        CNet::from_dense(
            DenseNet::new(vec![Layer::new(vec![row], vec![0.0], Activation::Relu).unwrap()])
                .unwrap(),
        )
        .unwrap()
    }

    fn comm_policies(cnet: CNet, seed: u64) -> PolicySet {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut set = PolicySet::init(Mode::PrivateComm, &mut rng);
        set.predators = match set.predators {
            PredatorPolicy::Comm { anet, .. } => PredatorPolicy::Comm { cnet, anet },
            other => other,
        };
        set
    }

    #[test]
    fn perfect_protocol_scores_full_accuracy() {
        let set = comm_policies(cnet_reading_one_hot(), 5);
        let config = EnvConfig::new(Mode::PrivateComm);
        let matrix = build_confusion_matrix(&set, &config, 20, 9).unwrap();
        assert_eq!(matrix.total(), 20 * 30 * 2);
        assert_eq!(matrix.counts[0][1], 0);
        assert_eq!(matrix.counts[1][0], 0);
        assert_eq!(matrix.accuracy(), 1.0);
    }

    #[test]
    fn silent_protocol_scores_chance() {
        // all-zero messages: every count lands in the symbol-0 column
        let silent = CNet::from_dense(
            DenseNet::new(vec![Layer::new(
                vec![vec![0.0; 12]],
                vec![0.0],
                Activation::Relu,
            )
            .unwrap()])
            .unwrap(),
        )
        .unwrap();
        let set = comm_policies(silent, 6);
        let config = EnvConfig::new(Mode::PrivateComm);
        let matrix = build_confusion_matrix(&set, &config, 10, 11).unwrap();
        assert_eq!(matrix.counts[0][1] + matrix.counts[1][1], 0);
        let acc = matrix.accuracy();
        assert!((0.5..=1.0).contains(&acc));
    }

    #[test]
    fn confusion_rejects_non_comm_checkpoints() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let set = PolicySet::init(Mode::FullObs, &mut rng);
        let config = EnvConfig::new(Mode::FullObs);
        assert!(build_confusion_matrix(&set, &config, 5, 1).is_err());
    }

    #[test]
    fn confusion_csv_layout_is_stable() {
        let matrix = ConfusionMatrix {
            counts: [[8, 2], [1, 9]],
        };
        let mut buf = Vec::new();
        write_confusion_csv(&mut buf, &matrix).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "row,msg0,msg1\ntarget0,8,2\ntarget1,1,9\naccuracy,0.85,\n"
        );
    }

    #[test]
    fn summary_json_round_trips() {
        let summary = SummaryFile::new(
            "private_comm",
            3,
            300,
            SummaryStats {
                average_reward: -64.49,
                average_std: 42.05,
                average_peak: -17.6,
                peak_std: 0.49,
            },
        );
        let mut buf = Vec::new();
        write_summary_json(&mut buf, &summary).unwrap();
        let parsed: SummaryFile = serde_json::from_slice(&buf).unwrap();
        assert_eq!(parsed, summary);
    }

    #[test]
    fn curves_outputs_are_well_formed() {
        let logs = vec![constant_log(-4.0, 5), constant_log(-6.0, 5)];
        let raw = mean_curve(&logs).unwrap();
        assert_eq!(raw, vec![-5.0; 5]);
        let smoothed = ewma(&raw, EWMA_ALPHA).unwrap();
        let mut csv = Vec::new();
        write_curves_csv(&mut csv, &raw, &smoothed).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,raw,smoothed\n0,-5,-5\n"));
        assert_eq!(text.lines().count(), 6);

        let mut svg = Vec::new();
        write_curves_svg(&mut svg, "private_comm", &raw, &smoothed).unwrap();
        let svg = String::from_utf8(svg).unwrap();
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("private_comm smoothed"));
        assert!(svg.contains("mean predator reward"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ewma_bounded_by_series_extremes(
                series in proptest::collection::vec(-100.0f64..100.0, 1..50),
                alpha in 0.01f64..1.0,
            ) {
                let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for v in ewma(&series, alpha).unwrap() {
                    prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
                }
            }

            #[test]
            fn accuracy_at_least_half_for_balanced_targets(
                a in 0u64..100, b in 0u64..100, c in 0u64..100, d in 0u64..100,
            ) {
                prop_assume!(a + b + c + d > 0);
                let m = ConfusionMatrix { counts: [[a, b], [c, d]] };
                let acc = m.accuracy();
                prop_assert!((0.5..=1.0).contains(&acc));
            }
        }
    }
}
