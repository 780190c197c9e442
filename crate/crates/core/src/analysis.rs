//! Equivariance-error metrics (R⁽⁰⁾, R(x), Q(x)), heatmap rendering, and
//! symmetry-weight inspection.

use serde::{Deserialize, Serialize};

use crate::dihedral::{act_on_adjacency, GroupElement, GROUP_ORDER};
use crate::error::{Error, Result};
use crate::models::{Model, Task, Variant};
use crate::signals::{baseline_subtract, Dataset, PlateConfig, RECON_LEN};
use crate::Tensor;

/// Frobenius norm over the off-diagonal sender–receiver entries from time
/// sample `t0` on.
fn offdiag_norm(v: &Tensor, t0: usize) -> f64 {
    let t_len = v.shape()[2];
    let mut acc = 0.0;
    for r in 0..4 {
        for s in 0..4 {
            if r == s {
                continue;
            }
            for t in t0..t_len {
                let x = v.data()[(r * 4 + s) * t_len + t];
                acc += x * x;
            }
        }
    }
    acc.sqrt()
}

fn offdiag_diff_norm(a: &Tensor, b: &Tensor, t0: usize) -> f64 {
    let t_len = a.shape()[2];
    let mut acc = 0.0;
    for r in 0..4 {
        for s in 0..4 {
            if r == s {
                continue;
            }
            for t in t0..t_len {
                let d = a.data()[(r * 4 + s) * t_len + t] - b.data()[(r * 4 + s) * t_len + t];
                acc += d * d;
            }
        }
    }
    acc.sqrt()
}

/// Compressed-sample index of the first S0 edge-path arrival, the default
/// pre-arrival cutoff (clamped into the record).
pub fn first_arrival_sample(plate: &PlateConfig) -> usize {
    let t_ms = plate.transducer_square_mm / plate.v_s0;
    let idx = (t_ms / plate.window_ms * RECON_LEN as f64).floor() as i64 - plate.trim as i64;
    idx.clamp(0, plate.compressed_len() as i64) as usize
}

/// Bare equivariance breaking of the baseline signals:
/// R⁽⁰⁾ = (1/8) Σ_g ‖V − ρ_g V‖ / ‖V‖, diagonals and pre-arrival times
/// excluded; returns (mean, std) over the baselines.
pub fn baseline_equivariance_error(baselines: &[Tensor], cutoff: usize) -> Result<(f64, f64)> {
    if baselines.is_empty() {
        return Err(Error::Data("no baselines given".into()));
    }
    let mut values = Vec::with_capacity(baselines.len());
    for v in baselines {
        let norm = offdiag_norm(v, cutoff);
        if norm == 0.0 {
            return Err(Error::Data("zero-norm baseline signal".into()));
        }
        let mut r = 0.0;
        for g in GroupElement::all() {
            let moved = act_on_adjacency(g, v);
            r += offdiag_diff_norm(v, &moved, cutoff) / norm;
        }
        values.push(r / GROUP_ORDER as f64);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / values.len() as f64;
    Ok((mean, var.sqrt()))
}

// ---------------------------------------------------------------------------
// Heatmaps
// ---------------------------------------------------------------------------

/// Square accumulation grid over the load-position span; pixel value is the
/// mean of its contributions, untouched pixels are missing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub n: usize,
    /// Pixel side, mm.
    pub pitch: f64,
    /// Grid half-span, mm (pixel centers run -half..=half).
    pub half: f64,
    sum: Vec<f64>,
    count: Vec<usize>,
}

impl HeatmapGrid {
    pub fn new(n: usize, span_mm: f64) -> Self {
        let pitch = if n > 1 { span_mm / (n - 1) as f64 } else { span_mm };
        Self {
            n,
            pitch,
            half: span_mm / 2.0,
            sum: vec![0.0; n * n],
            count: vec![0; n * n],
        }
    }

    fn index_of(&self, p: [f64; 2]) -> Option<(usize, usize, bool)> {
        let fx = (p[0] + self.half) / self.pitch;
        let fy = (p[1] + self.half) / self.pitch;
        let ix = fx.round();
        let iy = fy.round();
        if ix < 0.0 || iy < 0.0 || ix >= self.n as f64 || iy >= self.n as f64 {
            return None;
        }
        let snapped = (fx - ix).abs() > 1e-9 || (fy - iy).abs() > 1e-9;
        Some((ix as usize, iy as usize, snapped))
    }

    fn add(&mut self, ix: usize, iy: usize, value: f64) {
        self.sum[iy * self.n + ix] += value;
        self.count[iy * self.n + ix] += 1;
    }

    pub fn value(&self, ix: usize, iy: usize) -> Option<f64> {
        let c = self.count[iy * self.n + ix];
        (c > 0).then(|| self.sum[iy * self.n + ix] / c as f64)
    }

    pub fn count(&self, ix: usize, iy: usize) -> usize {
        self.count[iy * self.n + ix]
    }

    /// Σ value·count over all pixels (mass-conservation check).
    pub fn total_mass(&self) -> f64 {
        self.sum.iter().sum()
    }

    /// CSV rows from high y to low y; missing pixels rendered as `nan`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for iy in (0..self.n).rev() {
            let row: Vec<String> = (0..self.n)
                .map(|ix| match self.value(ix, iy) {
                    Some(v) => format!("{v}"),
                    None => "nan".into(),
                })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Spread each sample over its concentric pixel plus every pixel completely
/// inside the load footprint; off-lattice positions snap with a warning count.
pub fn render_heatmap(
    points: &[([f64; 2], f64)],
    n: usize,
    span_mm: f64,
    footprint_mm: f64,
) -> HeatmapGrid {
    let mut grid = HeatmapGrid::new(n, span_mm);
    // pixels whose full square fits inside the footprint half-width
    let reach = ((footprint_mm / 2.0 - grid.pitch / 2.0) / grid.pitch).floor().max(0.0) as i64;
    let mut snapped = 0usize;
    for &(p, value) in points {
        let Some((ix, iy, was_snapped)) = grid.index_of(p) else {
            continue;
        };
        if was_snapped {
            snapped += 1;
        }
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
                if jx >= 0 && jy >= 0 && (jx as usize) < n && (jy as usize) < n {
                    grid.add(jx as usize, jy as usize, value);
                }
            }
        }
    }
    if snapped > 0 {
        eprintln!("render_heatmap: snapped {snapped} off-lattice positions");
    }
    grid
}

// ---------------------------------------------------------------------------
// Equivariance-error fields
// ---------------------------------------------------------------------------

/// R(x): normalized distance between each residual and the transported
/// residual of its orbit partner, averaged over the group; positions without
/// a sampled partner skip that element.
pub fn input_equivariance_field(ds: &Dataset) -> Result<HeatmapGrid> {
    let mean = ds.mean_baseline()?;
    let key = |p: [f64; 2]| ((p[0] * 10.0).round() as i64, (p[1] * 10.0).round() as i64);
    let mut by_pos = std::collections::HashMap::new();
    let mut residuals = Vec::with_capacity(ds.examples.len());
    for e in &ds.examples {
        let Some(p) = e.position else { continue };
        residuals.push((p, baseline_subtract(&e.adjacency, &mean)?));
        by_pos.insert(key(p), residuals.len() - 1);
    }
    let mut points = Vec::with_capacity(residuals.len());
    let mut missing = 0usize;
    for (p, v) in &residuals {
        let mut acc = 0.0;
        for g in GroupElement::all() {
            let partner_pos = g.inverse().apply_vector(*p);
            let Some(&j) = by_pos.get(&key(partner_pos)) else {
                missing += 1;
                continue;
            };
            let (_, w) = &residuals[j];
            let moved = act_on_adjacency(g, w);
            let denom = 0.5 * (offdiag_norm(v, 0) + offdiag_norm(w, 0));
            if denom > 0.0 {
                acc += offdiag_diff_norm(v, &moved, 0) / denom;
            }
        }
        points.push((*p, acc / GROUP_ORDER as f64));
    }
    if missing > 0 {
        eprintln!("input_equivariance_field: {missing} orbit partners off-grid, skipped");
    }
    Ok(render_heatmap(
        &points,
        ds.plate.grid_n,
        ds.plate.grid_span_mm,
        ds.plate.load_face_mm,
    ))
}

/// Raw and normalized learned equivariance error fields.
pub struct LearnedField {
    /// Q(x) = (1/8) Σ_g ‖ρ_g Ψ[V] − Ψ[ρ_g V]‖ (output units; mm for locators).
    pub raw: HeatmapGrid,
    /// Q(x) divided by ‖Ψ[V]‖ per position.
    pub normalized: HeatmapGrid,
}

fn act_on_output(task: Task, g: GroupElement, out: &[f64]) -> Vec<f64> {
    match task {
        Task::Locate => g.apply_vector([out[0], out[1]]).to_vec(),
        Task::Detect => out.to_vec(),
    }
}

/// Q(x) over the dataset positions for a trained (or untrained) model.
pub fn learned_equivariance_field(model: &Model, ds: &Dataset) -> Result<LearnedField> {
    let mean = ds.mean_baseline()?;
    let task = model.spec().task;
    let mut raw_pts = Vec::new();
    let mut norm_pts = Vec::new();
    for e in &ds.examples {
        let Some(p) = e.position else { continue };
        let v = baseline_subtract(&e.adjacency, &mean)?;
        let base = model.predict(&v)?;
        let base_norm = base.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut acc = 0.0;
        for g in GroupElement::all() {
            let lhs = act_on_output(task, g, &base);
            let rhs = model.predict(&act_on_adjacency(g, &v))?;
            acc += lhs
                .iter()
                .zip(&rhs)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
        let q = acc / GROUP_ORDER as f64;
        raw_pts.push((p, q));
        norm_pts.push((p, if base_norm > 0.0 { q / base_norm } else { 0.0 }));
    }
    let render = |pts: &[([f64; 2], f64)]| {
        render_heatmap(pts, ds.plate.grid_n, ds.plate.grid_span_mm, ds.plate.load_face_mm)
    };
    Ok(LearnedField {
        raw: render(&raw_pts),
        normalized: render(&norm_pts),
    })
}

// ---------------------------------------------------------------------------
// Symmetry-weight report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerOmega {
    pub layer: String,
    pub omega: [f64; GROUP_ORDER],
    pub max_deviation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightReport {
    pub layers: Vec<LayerOmega>,
    /// Strictly decreasing max-deviation with depth?
    pub monotone_decreasing: bool,
}

/// ω(g) = 8·softmax(g/8) evaluated on plain numbers.
pub fn omega_of_raw(raw: &[f64]) -> [f64; GROUP_ORDER] {
    let scaled: Vec<f64> = raw.iter().map(|x| x / GROUP_ORDER as f64).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut out = [0.0; GROUP_ORDER];
    for (o, e) in out.iter_mut().zip(&exps) {
        *o = GROUP_ORDER as f64 * e / total;
    }
    out
}

/// Per-layer symmetry weights of an approximate model.
pub fn symmetry_weight_report(model: &Model) -> Result<WeightReport> {
    if model.spec().variant != Variant::Approximate {
        return Err(Error::InvalidArgument(
            "symmetry weights exist only in the approximate variant".into(),
        ));
    }
    let mut layers = Vec::new();
    for p in model.params() {
        if !p.name.ends_with("omega_raw") {
            continue;
        }
        let omega = omega_of_raw(p.value.data());
        let max_deviation = omega.iter().map(|w| (w - 1.0).abs()).fold(0.0, f64::max);
        layers.push(LayerOmega {
            layer: p.name.trim_end_matches(".omega_raw").to_string(),
            omega,
            max_deviation,
        });
    }
    let monotone_decreasing = layers
        .windows(2)
        .all(|w| w[1].max_deviation < w[0].max_deviation);
    Ok(WeightReport {
        layers,
        monotone_decreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use crate::signals::{compress_adjacency, generate_dataset, synthesize, SymmetryBreakSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quiet_plate(grid_n: usize) -> PlateConfig {
        PlateConfig {
            grid_n,
            noise: 0.0,
            ..PlateConfig::default()
        }
    }

    #[test]
    fn symmetric_baseline_has_zero_r0_and_jitter_raises_it() {
        let plate = quiet_plate(3);
        let cutoff = first_arrival_sample(&plate);
        let sym = SymmetryBreakSpec::default();
        let b = compress_adjacency(&synthesize(&plate, None, &sym, 0).unwrap(), plate.trim).unwrap();
        let (r0, spread) = baseline_equivariance_error(&[b], cutoff).unwrap();
        assert!(r0 <= 1e-9, "symmetric R0 = {}", r0);
        assert_eq!(spread, 0.0);

        let broken = SymmetryBreakSpec {
            gain_jitter: 0.10,
            seed: 3,
            ..SymmetryBreakSpec::default()
        };
        let b =
            compress_adjacency(&synthesize(&plate, None, &broken, 0).unwrap(), plate.trim).unwrap();
        let (r0_broken, _) = baseline_equivariance_error(&[b], cutoff).unwrap();
        assert!(r0_broken > 10.0 * r0.max(1e-12), "broken R0 = {}", r0_broken);
    }

    #[test]
    fn identity_element_contributes_nothing() {
        let v = Tensor::full(&[4, 4, 10], 1.25);
        let moved = act_on_adjacency(GroupElement::E, &v);
        assert_eq!(offdiag_diff_norm(&v, &moved, 0), 0.0);
    }

    #[test]
    fn heatmap_patch_and_mean_rules() {
        // single lattice sample: concentric pixel plus the fully covered 7x7
        let grid = render_heatmap(&[([0.0, 0.0], 2.5)], 51, 250.0, 40.0);
        let c = 25; // center index
        for iy in 0..51 {
            for ix in 0..51usize {
                let inside =
                    (ix as i64 - c as i64).abs() <= 3 && (iy as i64 - c as i64).abs() <= 3;
                match grid.value(ix, iy) {
                    Some(v) => {
                        assert!(inside, "unexpected fill at {},{}", ix, iy);
                        assert_eq!(v, 2.5);
                    }
                    None => assert!(!inside, "missing fill at {},{}", ix, iy),
                }
            }
        }
        assert_eq!(grid.total_mass(), 2.5 * 49.0);

        // duplicate positions average
        let grid = render_heatmap(&[([0.0, 0.0], 1.0), ([0.0, 0.0], 3.0)], 51, 250.0, 40.0);
        assert_eq!(grid.value(25, 25), Some(2.0));
        assert_eq!(grid.count(25, 25), 2);

        // empty input -> everything missing
        let grid = render_heatmap(&[], 51, 250.0, 40.0);
        assert!((0..51).all(|iy| (0..51).all(|ix| grid.value(ix, iy).is_none())));
    }

    #[test]
    fn heatmap_mass_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<([f64; 2], f64)> = (0..40)
            .map(|_| {
                let ix = rand::Rng::gen_range(&mut rng, 0..51) as f64;
                let iy = rand::Rng::gen_range(&mut rng, 0..51) as f64;
                (
                    [ix * 5.0 - 125.0, iy * 5.0 - 125.0],
                    rand::Rng::gen_range(&mut rng, -1.0..1.0),
                )
            })
            .collect();
        let grid = render_heatmap(&pts, 51, 250.0, 40.0);
        // every contribution lands on a counted pixel (interior points: 49 each)
        let total: f64 = pts
            .iter()
            .map(|&(p, v)| {
                let patch = |x: f64| -> f64 {
                    let i = ((x + 125.0) / 5.0).round() as i64;
                    (i.min(47).max(3) - i).abs().min(3) as f64; // unused guard
                    let lo = (i - 3).max(0);
                    let hi = (i + 3).min(50);
                    (hi - lo + 1) as f64
                };
                v * patch(p[0]) * patch(p[1])
            })
            .sum();
        assert!((grid.total_mass() - total).abs() < 1e-9);
    }

    #[test]
    fn symmetric_dataset_has_zero_input_field() {
        let plate = quiet_plate(3);
        let ds = generate_dataset(&plate, &SymmetryBreakSpec::default(), 1).unwrap();
        let grid = input_equivariance_field(&ds).unwrap();
        for iy in 0..3 {
            for ix in 0..3 {
                let v = grid.value(ix, iy).unwrap();
                assert!(v <= 1e-9, "R({},{}) = {}", ix, iy, v);
            }
        }
    }

    #[test]
    fn gain_jitter_raises_the_input_field_median() {
        let plate = quiet_plate(3);
        let median = |sym: &SymmetryBreakSpec| {
            let ds = generate_dataset(&plate, sym, 1).unwrap();
            let grid = input_equivariance_field(&ds).unwrap();
            let mut vals: Vec<f64> = (0..3)
                .flat_map(|iy| (0..3).filter_map(|ix| grid.value(ix, iy)).collect::<Vec<_>>())
                .collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals[vals.len() / 2]
        };
        let clean = median(&SymmetryBreakSpec::default());
        let broken = median(&SymmetryBreakSpec {
            gain_jitter: 0.10,
            seed: 5,
            ..SymmetryBreakSpec::default()
        });
        assert!(broken > clean, "median {} vs {}", broken, clean);
    }

    #[test]
    fn exact_model_learned_field_is_roundoff_and_approx_matches_at_init() {
        let plate = quiet_plate(3);
        let ds = generate_dataset(&plate, &SymmetryBreakSpec::default(), 2).unwrap();
        let exact = Model::build(ModelSpec::desk_scale(Variant::Exact, Task::Locate, 3)).unwrap();
        let field = learned_equivariance_field(&exact, &ds).unwrap();
        let mut out_scale = 0.0f64;
        for e in &ds.examples {
            let v = baseline_subtract(&e.adjacency, &ds.mean_baseline().unwrap()).unwrap();
            let o = exact.predict(&v).unwrap();
            out_scale = out_scale.max((o[0] * o[0] + o[1] * o[1]).sqrt());
        }
        for iy in 0..3 {
            for ix in 0..3 {
                assert!(field.raw.value(ix, iy).unwrap() <= 1e-8 * out_scale.max(1e-9));
            }
        }
        let approx =
            Model::build(ModelSpec::desk_scale(Variant::Approximate, Task::Locate, 3)).unwrap();
        let f2 = learned_equivariance_field(&approx, &ds).unwrap();
        for iy in 0..3 {
            for ix in 0..3 {
                assert_eq!(f2.raw.value(ix, iy), field.raw.value(ix, iy));
            }
        }
    }

    #[test]
    fn weight_report_identity_closed_form_and_trend() {
        let mut model =
            Model::build(ModelSpec::desk_scale(Variant::Approximate, Task::Locate, 6)).unwrap();
        let report = symmetry_weight_report(&model).unwrap();
        assert_eq!(report.layers.len(), 6);
        for l in &report.layers {
            assert_eq!(l.max_deviation, 0.0);
            for w in l.omega {
                assert_eq!(w, 1.0);
            }
        }

        // closed form: raw = (8, 0, ..., 0)
        let omega = omega_of_raw(&[8.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let e = 1.0f64.exp();
        let denom = e + 7.0;
        assert!((omega[0] - 8.0 * e / denom).abs() < 1e-12);
        for w in &omega[1..] {
            assert!((w - 8.0 / denom).abs() < 1e-12);
        }
        let sum: f64 = omega.iter().sum();
        assert!((sum - 8.0).abs() < 1e-12);

        // constructed decreasing deviation profile across the layer order
        let scales = [0.6, 0.5, 0.4, 0.3, 0.2, 0.1];
        let mut i = 0;
        for p in model.params_mut() {
            if p.name.ends_with("omega_raw") {
                p.value.data_mut()[0] = scales[i];
                i += 1;
            }
        }
        let report = symmetry_weight_report(&model).unwrap();
        assert!(report.monotone_decreasing);

        let exact = Model::build(ModelSpec::desk_scale(Variant::Exact, Task::Locate, 6)).unwrap();
        assert!(symmetry_weight_report(&exact).is_err());
    }

    #[test]
    fn csv_rendering_marks_missing_pixels() {
        let grid = render_heatmap(&[([0.0, 0.0], 1.0)], 3, 250.0, 40.0);
        let csv = grid.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("nan"));
        assert!(csv.lines().nth(1).unwrap().split(',').nth(1).unwrap() == "1");
    }
}
