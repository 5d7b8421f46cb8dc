//! Per-layer gradient statistics for comparing gradient flow across modes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::network::{combine_outputs, ForwardTrace, Mode, Network};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 101;
/// Gradients below this fraction of the layer's largest magnitude count as
/// near zero.
pub const NEAR_ZERO_REL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Histogram {
    /// `bins + 1` ascending edges; bin `k` is `[edges[k], edges[k + 1])`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Uniform histogram over `[-range, range]`. Values outside the range land
/// in the end bins. `range = None` uses the largest magnitude, or 1 when all
/// values are zero.
pub fn histogram(values: &[f64], bins: usize, range: Option<f64>) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::Input("histogram of an empty slice".into()));
    }
    if bins < 2 {
        return Err(Error::Input(format!("histogram needs at least 2 bins, got {bins}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("histogram input".into()));
    }
    let range = match range {
        Some(r) if !(r > 0.0) || !r.is_finite() => {
            return Err(Error::Input(format!("histogram range must be positive, got {r}")));
        }
        Some(r) => r,
        None => {
            let m = max_abs(values);
            if m > 0.0 { m } else { 1.0 }
        }
    };
    let width = 2.0 * range / bins as f64;
    let edges = (0..=bins).map(|k| -range + width * k as f64).collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        let pos = ((v + range) / width).floor();
        let k = if pos < 0.0 { 0 } else { (pos as usize).min(bins - 1) };
        counts[k] += 1;
    }
    Ok(Histogram { edges, counts })
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientStats {
    pub name: String,
    pub l2: f64,
    pub mean_abs: f64,
    pub near_zero_frac: f64,
    pub hist: Histogram,
}

impl GradientStats {
    pub fn compute(name: &str, grads: &[f64], bins: usize) -> Result<Self> {
        let hist = histogram(grads, bins, None)?;
        let n = grads.len() as f64;
        let max = max_abs(grads);
        let near_zero = if max == 0.0 {
            grads.len()
        } else {
            let cut = NEAR_ZERO_REL * max;
            grads.iter().filter(|g| g.abs() < cut).count()
        };
        Ok(GradientStats {
            name: name.to_string(),
            l2: grads.iter().map(|g| g * g).sum::<f64>().sqrt(),
            mean_abs: grads.iter().map(|g| g.abs()).sum::<f64>() / n,
            near_zero_frac: near_zero as f64 / n,
            hist,
        })
    }
}

/// Gradient statistics of one backward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VanishingReport {
    pub mode: Mode,
    pub lambda: f64,
    pub seed: u64,
    /// Every parameterized layer once, in parameter registration order.
    pub layers: Vec<GradientStats>,
    /// L2 norm of the first main-path conv gradient over that of the last;
    /// 0 when the last is exactly zero.
    pub ratio_first_last: f64,
}

impl VanishingReport {
    pub fn layer(&self, name: &str) -> Option<&GradientStats> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let finite = self.lambda.is_finite()
            && self.ratio_first_last.is_finite()
            && self
                .layers
                .iter()
                .all(|l| l.l2.is_finite() && l.mean_abs.is_finite());
        if !finite {
            return Err(Error::NonFinite("gradient report".into()));
        }
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,l2,mean_abs,near_zero_frac\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{},{}", l.name, l.l2, l.mean_abs, l.near_zero_frac);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn export_report(report: &VanishingReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => report.to_json()?,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<VanishingReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    VanishingReport::from_json(&text, path)
}

/// Layer name of a parameter: its name without the final component.
pub fn layer_of(param_name: &str) -> &str {
    param_name.rsplit_once('.').map_or(param_name, |(layer, _)| layer)
}

/// Groups gradients by layer, keeping registration order.
fn layer_grads(params: &ParamStore) -> Vec<(String, Vec<f64>)> {
    let mut order: Vec<(String, Vec<f64>)> = Vec::new();
    let mut index = BTreeMap::new();
    for (_, p) in params.iter() {
        let layer = layer_of(&p.name);
        let k = *index.entry(layer.to_string()).or_insert_with(|| {
            order.push((layer.to_string(), Vec::new()));
            order.len() - 1
        });
        order[k].1.extend_from_slice(&p.grad);
    }
    order
}

/// Owns a network for a single diagnostic forward and backward pass.
///
/// Capturing before [`GradientProbe::backward`] has run is a state error,
/// so an untouched network is not mistaken for one with zero gradients.
pub struct GradientProbe {
    net: Network,
    lambda: f64,
    backward_done: bool,
}

impl GradientProbe {
    pub fn new(mut net: Network, lambda: f64) -> Self {
        net.set_training(true);
        GradientProbe {
            net,
            lambda,
            backward_done: false,
        }
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Cross-entropy of the combined output on one batch, then backward.
    /// Returns the loss.
    pub fn backward(&mut self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let lambda = self.lambda;
        self.backward_with(images, |g, trace| {
            let out = combine_outputs(g, trace, lambda)?;
            g.softmax_cross_entropy(out, labels)
        })
    }

    /// Backward from a custom scalar built on the forward trace.
    pub fn backward_with(
        &mut self,
        images: &Tensor,
        loss: impl FnOnce(&mut Graph, &ForwardTrace) -> Result<Var>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let trace = self.net.forward_train(&mut g, images)?;
        let l = loss(&mut g, &trace)?;
        self.net.params_mut().zero_grad();
        g.backward(l, self.net.params_mut())?;
        self.backward_done = true;
        Ok(g.value(l).data()[0])
    }

    pub fn capture(&self, seed: u64) -> Result<VanishingReport> {
        capture_gradients(&self.net, self.backward_done, self.lambda, seed)
    }
}

/// Builds the report from the gradients currently held by `net`.
pub fn capture_gradients(
    net: &Network,
    backward_done: bool,
    lambda: f64,
    seed: u64,
) -> Result<VanishingReport> {
    if !backward_done {
        return Err(Error::State("gradients captured before any backward pass".into()));
    }
    let layers = layer_grads(net.params())
        .iter()
        .map(|(name, g)| GradientStats::compute(name, g, DEFAULT_BINS))
        .collect::<Result<Vec<_>>>()?;
    let convs = net.main_conv_layers();
    let l2 = |name: &str| layers.iter().find(|l| l.name == name).map_or(0.0, |l| l.l2);
    let first = l2(&convs[0]);
    let last = l2(convs.last().expect("at least one conv"));
    let ratio_first_last = if last > 0.0 { first / last } else { 0.0 };
    Ok(VanishingReport {
        mode: net.spec().mode,
        lambda,
        seed,
        layers,
        ratio_first_last,
    })
}

/// Outcome of one seed of the vanilla versus shortcut comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub vanilla_ratio: f64,
    pub shortcut_ratio: f64,
    pub vanilla_first_near_zero: f64,
    pub shortcut_first_near_zero: f64,
    /// Shortcut ratio strictly larger.
    pub ratio_win: bool,
    /// Shortcut first-layer near-zero fraction strictly smaller.
    pub near_zero_win: bool,
}

impl SeedComparison {
    pub fn new(seed: u64, vanilla: &VanishingReport, shortcut: &VanishingReport) -> Self {
        let first = |r: &VanishingReport| r.layers.first().map_or(0.0, |l| l.near_zero_frac);
        let (vz, sz) = (first(vanilla), first(shortcut));
        SeedComparison {
            seed,
            vanilla_ratio: vanilla.ratio_first_last,
            shortcut_ratio: shortcut.ratio_first_last,
            vanilla_first_near_zero: vz,
            shortcut_first_near_zero: sz,
            ratio_win: shortcut.ratio_first_last > vanilla.ratio_first_last,
            near_zero_win: sz < vz,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub seeds: Vec<SeedComparison>,
    pub ratio_wins: usize,
    pub near_zero_wins: usize,
}

impl ComparisonSummary {
    pub fn new(seeds: Vec<SeedComparison>) -> Self {
        ComparisonSummary {
            ratio_wins: seeds.iter().filter(|s| s.ratio_win).count(),
            near_zero_wins: seeds.iter().filter(|s| s.near_zero_win).count(),
            seeds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{BlockSpec, NetworkSpec};
    use crate::neuron::{NeuronConfig, SurrogateSpec};

    #[test]
    fn histogram_half_open_bins() {
        let h = histogram(&[-1.0, 0.0, 1.0], 2, Some(1.0)).unwrap();
        assert_eq!(h.counts, vec![1, 2]);
        assert_eq!(h.edges, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn histogram_zero_mass_in_middle_bin() {
        let h = histogram(&[0.0; 7], 101, None).unwrap();
        assert_eq!(h.counts[50], 7);
        assert_eq!(h.counts.iter().sum::<u64>(), 7);
        let h = histogram(&[0.0; 3], 4, None).unwrap();
        assert_eq!(h.counts, vec![0, 0, 3, 0]);
    }

    #[test]
    fn histogram_clamps_and_rejects() {
        let h = histogram(&[-9.0, 9.0, 0.5], 4, Some(1.0)).unwrap();
        assert_eq!(h.counts, vec![1, 0, 0, 2]);
        assert!(histogram(&[], 4, None).is_err());
        assert!(histogram(&[1.0], 1, None).is_err());
        assert!(histogram(&[1.0], 2, Some(0.0)).is_err());
        assert!(histogram(&[f64::NAN], 2, None).is_err());
    }

    #[test]
    fn stats_of_zero_grads() {
        let s = GradientStats::compute("x", &[0.0; 5], 11).unwrap();
        assert_eq!((s.l2, s.mean_abs, s.near_zero_frac), (0.0, 0.0, 1.0));
    }

    #[test]
    fn stats_values() {
        let s = GradientStats::compute("x", &[3.0, -4.0, 1e-9, 0.0], 11).unwrap();
        assert!((s.l2 - 5.0).abs() < 1e-12);
        assert!((s.mean_abs - (7.0 + 1e-9) / 4.0).abs() < 1e-15);
        assert_eq!(s.near_zero_frac, 0.5);
    }

    fn net(blocks: Vec<BlockSpec>, mode: Mode) -> Network {
        let spec = NetworkSpec {
            in_channels: 1,
            input_size: [5, 5],
            classes: 3,
            timesteps: 2,
            mode,
            blocks,
        };
        Network::build(spec, NeuronConfig::default(), SurrogateSpec::default(), 3).unwrap()
    }

    fn input() -> (Tensor, Vec<usize>) {
        let x = Tensor::from_fn(&[3, 1, 5, 5], |i| ((i * 7) % 11) as f64 / 5.0);
        (x, vec![0, 1, 2])
    }

    #[test]
    fn capture_before_backward_is_state_error() {
        let p = GradientProbe::new(net(vec![BlockSpec::plain(1, 2, 1)], Mode::Vanilla), 0.0);
        assert!(matches!(p.capture(0), Err(Error::State(_))));
    }

    #[test]
    fn zero_loss_gives_zero_stats() {
        let mut p = GradientProbe::new(
            net(vec![BlockSpec::plain(1, 2, 1), BlockSpec::plain(2, 2, 1)], Mode::Shortcut),
            0.25,
        );
        let (x, _) = input();
        p.backward_with(&x, |g, t| {
            let s = g.sum(t.main());
            Ok(g.scale(s, 0.0))
        })
        .unwrap();
        let r = p.capture(1).unwrap();
        assert_eq!(r.layers.len(), 6);
        for l in &r.layers {
            assert_eq!((l.l2, l.mean_abs, l.near_zero_frac), (0.0, 0.0, 1.0), "{}", l.name);
        }
        assert_eq!(r.ratio_first_last, 0.0);
    }

    #[test]
    fn single_layer_ratio_is_one() {
        let mut p = GradientProbe::new(net(vec![BlockSpec::plain(1, 2, 1)], Mode::Vanilla), 0.0);
        let (x, y) = input();
        p.backward(&x, &y).unwrap();
        let r = p.capture(0).unwrap();
        let names: Vec<&str> = r.layers.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["block.1.conv1", "block.1.bn1", "head.1"]);
        assert_eq!(r.ratio_first_last, 1.0);
        for l in &r.layers {
            assert!(l.near_zero_frac >= 0.0 && l.near_zero_frac <= 1.0);
        }
    }

    #[test]
    fn counts_match_layer_sizes_and_capture_is_pure() {
        let blocks = vec![BlockSpec::plain(1, 2, 1), BlockSpec::plain(2, 3, 1)];
        let mut p = GradientProbe::new(net(blocks, Mode::Shortcut), 0.25);
        let (x, y) = input();
        p.backward(&x, &y).unwrap();
        let grads: Vec<Vec<f64>> = p.net().params().iter().map(|(_, q)| q.grad.clone()).collect();
        let r = p.capture(0).unwrap();
        let after: Vec<Vec<f64>> = p.net().params().iter().map(|(_, q)| q.grad.clone()).collect();
        assert_eq!(grads, after);
        for l in &r.layers {
            let size: usize = p
                .net()
                .params()
                .iter()
                .filter(|(_, q)| layer_of(&q.name) == l.name)
                .map(|(_, q)| q.value.numel())
                .sum();
            assert_eq!(l.hist.counts.iter().sum::<u64>() as usize, size);
        }
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let mut p = GradientProbe::new(
            net(vec![BlockSpec::plain(1, 2, 1), BlockSpec::plain(2, 2, 1)], Mode::Shortcut),
            0.25,
        );
        let (x, y) = input();
        p.backward(&x, &y).unwrap();
        let r = p.capture(7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        export_report(&r, &a, ReportFormat::Json).unwrap();
        let back = read_report(&a).unwrap();
        assert_eq!(back, r);
        let b = dir.path().join("b.json");
        export_report(&back, &b, ReportFormat::Json).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let c = dir.path().join("r.csv");
        export_report(&r, &c, ReportFormat::Csv).unwrap();
        let csv = std::fs::read_to_string(&c).unwrap();
        assert_eq!(csv.lines().count(), r.layers.len() + 1);
        let text = std::fs::read_to_string(&a).unwrap();
        let pos: Vec<usize> = ["\"mode\"", "\"lambda\"", "\"seed\"", "\"layers\"", "\"ratio_first_last\""]
            .iter()
            .map(|k| text.find(k).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }
}
