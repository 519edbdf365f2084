//! Report types with CSV round-tripping and SVG rendering.

use std::path::{Path, PathBuf};

use csv::{ReaderBuilder, StringRecord, WriterBuilder};

use super::svg::{BarChart, Series};
use crate::blindspot::TransformParams;
use crate::error::{invalid, Error, Result};
use crate::geometry::{ClassKl, PerClassKl};

/// Attack success against distance-to-training-set, in equal-width bins.
#[derive(Clone, Debug, PartialEq)]
pub struct BinnedReport {
    /// `bins + 1` edges in distance units.
    pub edges: Vec<f64>,
    /// Evaluated test points per bin.
    pub counts: Vec<usize>,
    /// Correctly classified (hence attacked) points per bin.
    pub attacked: Vec<usize>,
    pub successes: Vec<usize>,
    pub min_bin_count: usize,
    pub threshold: f64,
}

/// Per-point attack outcome: `None` when the point was not attacked.
pub type Outcome = Option<bool>;

impl BinnedReport {
    /// Bins `distances` over `[min, max]`; the maximum falls in the last bin.
    pub fn from_points(distances: &[f64], outcomes: &[Outcome], bins: usize, min_bin_count: usize, threshold: f64) -> Result<BinnedReport> {
        if distances.len() != outcomes.len() {
            return Err(invalid!("{} distances but {} outcomes", distances.len(), outcomes.len()));
        }
        if bins == 0 {
            return Err(invalid!("need at least one bin"));
        }
        if distances.iter().any(|d| !d.is_finite()) {
            return Err(invalid!("distances must be finite"));
        }
        let mut report = BinnedReport {
            edges: Vec::new(),
            counts: vec![0; bins],
            attacked: vec![0; bins],
            successes: vec![0; bins],
            min_bin_count,
            threshold,
        };
        if distances.is_empty() {
            report.counts.clear();
            report.attacked.clear();
            report.successes.clear();
            return Ok(report);
        }
        let lo = distances.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        report.edges = equal_edges(lo, hi, bins);
        for (&d, o) in distances.iter().zip(outcomes) {
            let b = bin_of(d, lo, hi, bins);
            report.counts[b] += 1;
            if let Some(success) = o {
                report.attacked[b] += 1;
                if *success {
                    report.successes[b] += 1;
                }
            }
        }
        Ok(report)
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Success rate for bins holding at least `min_bin_count` points.
    pub fn success_rates(&self) -> Vec<Option<f64>> {
        (0..self.bins())
            .map(|b| {
                (self.counts[b] >= self.min_bin_count && self.attacked[b] > 0)
                    .then(|| self.successes[b] as f64 / self.attacked[b] as f64)
            })
            .collect()
    }

    /// Spearman correlation between bin index and success rate over reported bins.
    pub fn trend(&self) -> Option<f64> {
        let (idx, rates): (Vec<f64>, Vec<f64>) = self
            .success_rates()
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.map(|r| (i as f64, r)))
            .unzip();
        spearman(&idx, &rates)
    }
}

pub(crate) fn equal_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let width = (hi - lo) / bins as f64;
    (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect()
}

pub(crate) fn bin_of(d: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((d - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

/// Spearman rank correlation with tied values given their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&ranks(x), &ranks(y))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub params: TransformParams,
    /// Accuracy on the transformed images.
    pub accuracy: Option<f64>,
    pub evaluated: usize,
    pub attacked: usize,
    pub success_eps: Option<f64>,
    /// Success below `α·ε`.
    pub success_strict: Option<f64>,
    pub error: Option<String>,
}

/// One row per `(α, β)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub epsilon: f64,
    pub rows: Vec<GridRow>,
}

impl GridReport {
    pub fn row(&self, alpha: f64, beta: f64) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.params.alpha() == alpha && r.params.beta() == beta)
    }
}

/// k-NN distance histograms of original and transformed test sets on shared edges.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftHistograms {
    pub edges: Vec<f64>,
    pub original: Vec<usize>,
    pub transformed: Vec<usize>,
}

impl ShiftHistograms {
    /// `Σ min(p_i, q_i)` of the two normalised histograms, 1 for identical shapes.
    pub fn overlap(&self) -> f64 {
        let (a, b) = (self.original.iter().sum::<usize>(), self.transformed.iter().sum::<usize>());
        if a == 0 || b == 0 {
            return 0.0;
        }
        self.original
            .iter()
            .zip(&self.transformed)
            .map(|(&o, &t)| (o as f64 / a as f64).min(t as f64 / b as f64))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Report {
    Binned(BinnedReport),
    Grid(GridReport),
    Divergence(PerClassKl),
    Shift(ShiftHistograms),
}

const BINNED_HEADER: [&str; 9] = ["bin", "lo", "hi", "count", "attacked", "successes", "success_rate", "min_bin_count", "threshold"];
const GRID_HEADER: [&str; 10] = [
    "alpha",
    "beta",
    "accuracy",
    "evaluated",
    "attacked",
    "success_eps",
    "success_strict",
    "epsilon",
    "strict_threshold",
    "error",
];
const KL_HEADER: [&str; 5] = ["class", "train_count", "test_count", "kl", "error"];
const SHIFT_HEADER: [&str; 5] = ["bin", "lo", "hi", "original", "transformed"];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {}", e))
}

struct Fields<'a> {
    rec: &'a StringRecord,
    line: usize,
}

impl Fields<'_> {
    fn str(&self, i: usize) -> Result<&str> {
        self.rec
            .get(i)
            .ok_or_else(|| Error::Parse(format!("row {}: missing column {}", self.line, i)))
    }

    fn num<T: std::str::FromStr>(&self, i: usize) -> Result<T> {
        let s = self.str(i)?;
        s.parse()
            .map_err(|_| Error::Parse(format!("row {}: cannot parse '{}'", self.line, s)))
    }

    fn opt_f64(&self, i: usize) -> Result<Option<f64>> {
        if self.str(i)?.is_empty() {
            Ok(None)
        } else {
            self.num(i).map(Some)
        }
    }

    fn opt_str(&self, i: usize) -> Result<Option<String>> {
        let s = self.str(i)?;
        Ok((!s.is_empty()).then(|| s.to_string()))
    }
}

impl Report {
    pub fn kind(&self) -> &'static str {
        match self {
            Report::Binned(_) => "binned",
            Report::Grid(_) => "grid",
            Report::Divergence(_) => "divergence",
            Report::Shift(_) => "shift",
        }
    }

    /// RFC 4180 CSV with a header row and LF line endings.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let mut row = |fields: Vec<String>| w.write_record(&fields).map_err(csv_err);
        match self {
            Report::Binned(r) => {
                row(BINNED_HEADER.iter().map(|s| s.to_string()).collect())?;
                let rates = r.success_rates();
                for b in 0..r.bins() {
                    row(vec![
                        b.to_string(),
                        r.edges[b].to_string(),
                        r.edges[b + 1].to_string(),
                        r.counts[b].to_string(),
                        r.attacked[b].to_string(),
                        r.successes[b].to_string(),
                        opt(rates[b]),
                        r.min_bin_count.to_string(),
                        r.threshold.to_string(),
                    ])?;
                }
            }
            Report::Grid(g) => {
                row(GRID_HEADER.iter().map(|s| s.to_string()).collect())?;
                for r in &g.rows {
                    row(vec![
                        r.params.alpha().to_string(),
                        r.params.beta().to_string(),
                        opt(r.accuracy),
                        r.evaluated.to_string(),
                        r.attacked.to_string(),
                        opt(r.success_eps),
                        opt(r.success_strict),
                        g.epsilon.to_string(),
                        crate::blindspot::strict_threshold(&r.params, g.epsilon).to_string(),
                        r.error.clone().unwrap_or_default(),
                    ])?;
                }
            }
            Report::Divergence(k) => {
                row(KL_HEADER.iter().map(|s| s.to_string()).collect())?;
                for c in &k.classes {
                    let (kl, err) = match &c.kl {
                        Ok(v) => (v.to_string(), String::new()),
                        Err(e) => (String::new(), e.clone()),
                    };
                    row(vec![c.class.to_string(), c.train_count.to_string(), c.test_count.to_string(), kl, err])?;
                }
            }
            Report::Shift(s) => {
                row(SHIFT_HEADER.iter().map(|s| s.to_string()).collect())?;
                for b in 0..s.original.len() {
                    row(vec![
                        b.to_string(),
                        s.edges[b].to_string(),
                        s.edges[b + 1].to_string(),
                        s.original[b].to_string(),
                        s.transformed[b].to_string(),
                    ])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(format!("csv: {}", e)))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Parses any report written by [`Report::to_csv`], recognised by its header.
    pub fn from_csv(text: &str) -> Result<Report> {
        let mut rdr = ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let records: Vec<StringRecord> = rdr.records().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
        let rows = records.iter().enumerate().map(|(i, rec)| Fields { rec, line: i + 2 });
        if header == BINNED_HEADER {
            let mut r = BinnedReport {
                edges: Vec::new(),
                counts: Vec::new(),
                attacked: Vec::new(),
                successes: Vec::new(),
                min_bin_count: 0,
                threshold: 0.0,
            };
            for f in rows {
                if r.edges.is_empty() {
                    r.edges.push(f.num(1)?);
                }
                r.edges.push(f.num(2)?);
                r.counts.push(f.num(3)?);
                r.attacked.push(f.num(4)?);
                r.successes.push(f.num(5)?);
                r.min_bin_count = f.num(7)?;
                r.threshold = f.num(8)?;
            }
            Ok(Report::Binned(r))
        } else if header == GRID_HEADER {
            let mut g = GridReport {
                epsilon: 0.0,
                rows: Vec::new(),
            };
            for f in rows {
                g.epsilon = f.num(7)?;
                g.rows.push(GridRow {
                    params: TransformParams::new(f.num(0)?, f.num(1)?)?,
                    accuracy: f.opt_f64(2)?,
                    evaluated: f.num(3)?,
                    attacked: f.num(4)?,
                    success_eps: f.opt_f64(5)?,
                    success_strict: f.opt_f64(6)?,
                    error: f.opt_str(9)?,
                });
            }
            Ok(Report::Grid(g))
        } else if header == KL_HEADER {
            let mut classes = Vec::new();
            for f in rows {
                let kl = match f.opt_f64(3)? {
                    Some(v) => Ok(v),
                    None => Err(f.str(4)?.to_string()),
                };
                classes.push(ClassKl {
                    class: f.num(0)?,
                    train_count: f.num(1)?,
                    test_count: f.num(2)?,
                    kl,
                });
            }
            Ok(Report::Divergence(PerClassKl::from_classes(classes)))
        } else if header == SHIFT_HEADER {
            let mut s = ShiftHistograms {
                edges: Vec::new(),
                original: Vec::new(),
                transformed: Vec::new(),
            };
            for f in rows {
                if s.edges.is_empty() {
                    s.edges.push(f.num(1)?);
                }
                s.edges.push(f.num(2)?);
                s.original.push(f.num(3)?);
                s.transformed.push(f.num(4)?);
            }
            Ok(Report::Shift(s))
        } else {
            Err(Error::Parse(format!("unrecognised report header '{}'", header.join(","))))
        }
    }

    /// Standalone SVG figure with deterministic output.
    pub fn to_svg(&self) -> String {
        match self {
            Report::Binned(r) => {
                let labels = bin_labels(&r.edges);
                let max = r.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
                BarChart {
                    title: format!("Attack success by distance to training set (threshold {})", r.threshold),
                    x_label: "k-NN distance".into(),
                    labels,
                    series: vec![
                        Series {
                            name: "test points (share of largest bin)".into(),
                            values: r.counts.iter().map(|&c| Some(c as f64 / max)).collect(),
                            color: "#b0b0b0",
                        },
                        Series {
                            name: "attack success rate".into(),
                            values: r.success_rates(),
                            color: "#c0392b",
                        },
                    ],
                }
                .render()
            }
            Report::Grid(g) => BarChart {
                title: format!("Scale-shift grid (epsilon {})", g.epsilon),
                x_label: "(alpha, beta)".into(),
                labels: g.rows.iter().map(|r| format!("({}, {})", r.params.alpha(), r.params.beta())).collect(),
                series: vec![
                    Series {
                        name: "accuracy".into(),
                        values: g.rows.iter().map(|r| r.accuracy).collect(),
                        color: "#2e86c1",
                    },
                    Series {
                        name: "success at epsilon".into(),
                        values: g.rows.iter().map(|r| r.success_eps).collect(),
                        color: "#e67e22",
                    },
                    Series {
                        name: "success at alpha*epsilon".into(),
                        values: g.rows.iter().map(|r| r.success_strict).collect(),
                        color: "#c0392b",
                    },
                ],
            }
            .render(),
            Report::Divergence(k) => {
                let max = k.classes.iter().filter_map(|c| c.kl.as_ref().ok().copied()).fold(0.0f64, f64::max);
                let scale = if max > 0.0 { max } else { 1.0 };
                BarChart {
                    title: format!("Per-class K-L divergence (max {:.4}, mean {})", max, opt(k.mean)),
                    x_label: "class".into(),
                    labels: k.classes.iter().map(|c| c.class.to_string()).collect(),
                    series: vec![Series {
                        name: "K-L divergence (share of max)".into(),
                        values: k.classes.iter().map(|c| c.kl.as_ref().ok().map(|v| (v / scale).max(0.0))).collect(),
                        color: "#8e44ad",
                    }],
                }
                .render()
            }
            Report::Shift(s) => {
                let (a, b) = (s.original.iter().sum::<usize>().max(1), s.transformed.iter().sum::<usize>().max(1));
                let frac = |v: &[usize], n: usize| v.iter().map(|&c| c as f64 / n as f64).collect::<Vec<_>>();
                let (fa, fb) = (frac(&s.original, a), frac(&s.transformed, b));
                let max = fa.iter().chain(&fb).copied().fold(0.0f64, f64::max).max(1e-12);
                BarChart {
                    title: format!("k-NN distance, original vs transformed (overlap {:.4})", s.overlap()),
                    x_label: "k-NN distance".into(),
                    labels: bin_labels(&s.edges),
                    series: vec![
                        Series {
                            name: "original".into(),
                            values: fa.iter().map(|v| Some(v / max)).collect(),
                            color: "#2e86c1",
                        },
                        Series {
                            name: "transformed".into(),
                            values: fb.iter().map(|v| Some(v / max)).collect(),
                            color: "#e67e22",
                        },
                    ],
                }
                .render()
            }
        }
    }
}

fn bin_labels(edges: &[f64]) -> Vec<String> {
    edges.windows(2).map(|w| format!("{:.3}", 0.5 * (w[0] + w[1]))).collect()
}

/// Writes `<name>.csv` and `<name>.svg` into `out_dir`.
pub fn emit_report(report: &Report, name: &str, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join(format!("{}.csv", name));
    let svg_path = out_dir.join(format!("{}.svg", name));
    std::fs::write(&csv_path, report.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
    std::fs::write(&svg_path, report.to_svg()).map_err(|e| Error::io(&svg_path, e))?;
    Ok((csv_path, svg_path))
}
