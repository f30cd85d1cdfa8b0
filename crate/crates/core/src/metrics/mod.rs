//! Segmentation metrics, paired significance testing and batch evaluation.

mod surface;
mod wilcoxon;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use surface::{boundary, dsc, iou, nsd, squared_distance_transform, Score};
pub use wilcoxon::{
    null_distribution, wilcoxon_signed_rank, wilcoxon_signed_rank_with, Method, WilcoxonResult,
    EXACT_MAX_N,
};

use crate::error::{Error, FormatError, Result};
use crate::imgproc::percentile_sorted;
use crate::mask::BinaryMask;
use crate::model::{predict, BoundingBox, ModelConfig, ParameterSet};
use crate::synth::Sample;
use crate::train::simulate_box;

/// Default NSD tolerance in elements.
pub const DEFAULT_TOLERANCE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub case_id: String,
    pub task: String,
    pub dsc: f64,
    pub nsd: f64,
    pub tolerance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Quartiles> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Quartiles {
            q25: percentile_sorted(&v, 25.0),
            median: percentile_sorted(&v, 50.0),
            q75: percentile_sorted(&v, 75.0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub cases: usize,
    pub dsc: Quartiles,
    pub nsd: Quartiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<MetricRecord>,
    /// One entry per task plus a final `"all"` entry.
    pub summary: Vec<TaskSummary>,
}

impl EvalReport {
    pub fn overall(&self) -> &TaskSummary {
        self.summary.last().expect("summary always has the overall entry")
    }
}

pub fn summarize(records: &[MetricRecord]) -> Result<Vec<TaskSummary>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no metric records".into()));
    }
    let mut by_task: BTreeMap<&str, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        by_task.entry(&r.task).or_default().push(r);
    }
    let entry = |task: &str, rs: &[&MetricRecord]| TaskSummary {
        task: task.to_string(),
        cases: rs.len(),
        dsc: Quartiles::of(&rs.iter().map(|r| r.dsc).collect::<Vec<_>>()).expect("nonempty"),
        nsd: Quartiles::of(&rs.iter().map(|r| r.nsd).collect::<Vec<_>>()).expect("nonempty"),
    };
    let mut out: Vec<TaskSummary> = by_task.iter().map(|(t, rs)| entry(t, rs)).collect();
    out.push(entry("all", &records.iter().collect::<Vec<_>>()));
    Ok(out)
}

/// One object of one sample.
#[derive(Clone, Copy, Debug)]
pub struct Case<'a> {
    pub sample: &'a Sample,
    pub object: usize,
}

impl Case<'_> {
    pub fn id(&self) -> String {
        format!("{}#{}", self.sample.id, self.object)
    }

    pub fn ground_truth(&self) -> &BinaryMask {
        &self.sample.masks[self.object]
    }
}

pub fn cases<'a>(samples: &[&'a Sample]) -> Vec<Case<'a>> {
    samples
        .iter()
        .flat_map(|s| (0..s.masks.len()).map(move |object| Case { sample: s, object }))
        .collect()
}

/// Scores every object of `samples` with an arbitrary predictor.
pub fn evaluate_with<F>(samples: &[&Sample], tau: f64, predictor: F) -> Result<EvalReport>
where
    F: Fn(&Case<'_>) -> Result<BinaryMask> + Sync,
{
    let cases = cases(samples);
    if cases.is_empty() {
        return Err(Error::EmptyInput("evaluation split has no cases".into()));
    }
    let records = cases
        .par_iter()
        .map(|case| {
            let pred = predictor(case)?;
            let gt = case.ground_truth();
            Ok(MetricRecord {
                case_id: case.id(),
                task: case.sample.style.name().to_string(),
                dsc: dsc(gt, &pred)?.value,
                nsd: nsd(gt, &pred, tau)?.value,
                tolerance: tau,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&records)?;
    Ok(EvalReport { records, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tolerance: f64,
    /// Outward box perturbation; 0 means tight boxes.
    pub perturb_max: u32,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            perturb_max: 0,
            seed: 0,
        }
    }
}

/// Box prompt used for a case: tight, or perturbed with a per-case stream.
pub fn case_box(case: &Case<'_>, index: usize, opts: &EvalOptions) -> Result<BoundingBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64);
    simulate_box(case.ground_truth(), opts.perturb_max, &mut rng)
}

/// Predicts every case from its box prompt and scores it.
pub fn evaluate_run(
    samples: &[&Sample],
    params: &ParameterSet,
    cfg: &ModelConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let all = cases(samples);
    let index: BTreeMap<(String, usize), usize> = all
        .iter()
        .enumerate()
        .map(|(i, c)| ((c.sample.id.clone(), c.object), i))
        .collect();
    evaluate_with(samples, opts.tolerance, |case| {
        let i = index[&(case.sample.id.clone(), case.object)];
        let b = case_box(case, i, opts)?;
        Ok(predict(&case.sample.image, &b, params, cfg)?.mask)
    })
}

pub const CSV_HEADER: &str = "case_id,task,dsc,nsd";

pub fn write_csv(records: &[MetricRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{},{},{},{}", r.case_id, r.task, r.dsc, r.nsd)?;
    }
    Ok(())
}

/// Reads records written by [`write_csv`]; the tolerance is not stored
/// and comes back as [`DEFAULT_TOLERANCE`].
pub fn read_csv(input: impl BufRead) -> Result<Vec<MetricRecord>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(CSV_HEADER) {
        return Err(FormatError::Header("expected metric CSV header".into()).into());
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || FormatError::Header(format!("malformed metric CSV row {}", n + 2));
        if f.len() != 4 {
            return Err(bad().into());
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        out.push(MetricRecord {
            case_id: f[0].to_string(),
            task: f[1].to_string(),
            dsc: num(f[2])?,
            nsd: num(f[3])?,
            tolerance: DEFAULT_TOLERANCE,
        });
    }
    Ok(out)
}

/// Pairs two runs by case id and tests their DSC values.
pub fn compare_runs(a: &[MetricRecord], b: &[MetricRecord]) -> Result<WilcoxonResult> {
    let lookup: BTreeMap<&str, f64> = b.iter().map(|r| (r.case_id.as_str(), r.dsc)).collect();
    let mut xs = Vec::with_capacity(a.len());
    let mut ys = Vec::with_capacity(a.len());
    for r in a {
        let y = lookup.get(r.case_id.as_str()).ok_or_else(|| {
            Error::ShapeMismatch(format!("case {} missing from the second run", r.case_id))
        })?;
        xs.push(r.dsc);
        ys.push(*y);
    }
    if xs.len() != b.len() {
        return Err(Error::ShapeMismatch("runs cover different cases".into()));
    }
    wilcoxon_signed_rank(&xs, &ys)
}
