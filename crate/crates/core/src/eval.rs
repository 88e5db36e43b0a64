//! File scoring, ROC metrics, per-type summaries, mixed-family selection
//! and result tables.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::audio::AudioClip;
use crate::features::{
    dense_feature_vectors, log_mel_spectrogram, patches_from_spectrogram, FeatureError, NormalizerStats,
};
use crate::model::{reconstruction_error, ModelCheckpoint, ModelError, ModelFamily, Network};
use crate::trainer::FileInput;

/// Upper false-positive rate of the partial AUC.
pub const PAUC_MAX_FPR: f64 = 0.1;

const BUNDLED_BASELINE: &str = include_str!("../fixtures/table2_dev.csv");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least one normal and one anomalous score, got {normal} normal and {anomaly} anomalous")]
    DegenerateLabels { normal: usize, anomaly: usize },
    #[error("machine type '{0}' has no machines")]
    EmptyType(String),
    #[error("no {family} result for machine type '{machine_type}'")]
    MissingFamily { machine_type: String, family: ModelFamily },
    #[error("non-finite score for {0}")]
    NonFiniteScore(String),
    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Anomaly,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomaly => "anomaly",
            Label::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub file_id: String,
    pub machine_type: String,
    pub machine_id: String,
    pub label: Label,
    pub score: f64,
}

/// A checkpoint unpacked for scoring.
#[derive(Debug, Clone)]
pub struct Scorer {
    net: Network<f32>,
    normalizer: Option<NormalizerStats>,
}

impl Scorer {
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self, EvalError> {
        Ok(Self {
            net: ckpt.to_network()?,
            normalizer: ckpt.normalizer.clone(),
        })
    }

    pub fn family(&self) -> ModelFamily {
        self.net.family()
    }

    /// Errors of every segment of the clip.
    pub fn segment_errors(&self, clip: &AudioClip) -> Result<Vec<f64>, EvalError> {
        let input = match self.family() {
            ModelFamily::Dense => FileInput::Dense(dense_feature_vectors(clip)?),
            ModelFamily::Conv => FileInput::Spectrogram(log_mel_spectrogram(clip)?),
        };
        self.input_errors(&input)
    }

    /// Segment errors of already extracted features. A spectrogram is
    /// standardized with the stored normalizer and cut into patches.
    pub fn input_errors(&self, input: &FileInput) -> Result<Vec<f64>, EvalError> {
        let features = match input {
            FileInput::Dense(set) => set.clone(),
            FileInput::Spectrogram(spec) => patches_from_spectrogram(spec, self.normalizer.as_ref())?,
        };
        Ok(reconstruction_error(&self.net, &features)?)
    }

    /// Mean segment reconstruction error.
    pub fn score(&self, clip: &AudioClip) -> Result<f64, EvalError> {
        mean_score(&self.segment_errors(clip)?, clip.source_path())
    }

    pub fn score_input(&self, input: &FileInput, name: &str) -> Result<f64, EvalError> {
        mean_score(&self.input_errors(input)?, name)
    }
}

fn mean_score(errors: &[f64], name: &str) -> Result<f64, EvalError> {
    let score = errors.iter().sum::<f64>() / errors.len() as f64;
    if !score.is_finite() {
        return Err(EvalError::NonFiniteScore(name.to_string()));
    }
    Ok(score)
}

/// Anomaly score of one clip under a checkpoint.
pub fn score_file(ckpt: &ModelCheckpoint, clip: &AudioClip) -> Result<f64, EvalError> {
    Scorer::from_checkpoint(ckpt)?.score(clip)
}

fn split_labels(scores: &[(f64, Label)]) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let mut normal = Vec::new();
    let mut anomaly = Vec::new();
    for &(s, l) in scores {
        match l {
            Label::Normal => normal.push(s),
            Label::Anomaly => anomaly.push(s),
            Label::Unknown => {}
        }
    }
    if normal.is_empty() || anomaly.is_empty() {
        return Err(EvalError::DegenerateLabels {
            normal: normal.len(),
            anomaly: anomaly.len(),
        });
    }
    Ok((normal, anomaly))
}

/// Area under the ROC curve in percent, via the Mann-Whitney rank
/// statistic with average ranks for ties. Unknown labels are ignored.
pub fn auc(scores: &[(f64, Label)]) -> Result<f64, EvalError> {
    let (normal, anomaly) = split_labels(scores)?;
    let mut all: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, false))
        .chain(anomaly.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (n_a, n_n) = (anomaly.len() as f64, normal.len() as f64);
    Ok(100.0 * (rank_sum - n_a * (n_a + 1.0) / 2.0) / (n_a * n_n))
}

/// ROC points `(fpr, tpr)` from (0, 0) to (1, 1), one per distinct score,
/// thresholds descending. Tied scores form a single diagonal step.
fn roc_points(normal: &[f64], anomaly: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, false))
        .chain(anomaly.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_n, n_a) = (normal.len() as f64, anomaly.len() as f64);
    let mut pts = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        pts.push((fp as f64 / n_n, tp as f64 / n_a));
        i = j;
    }
    pts
}

/// Partial AUC over FPR in `[0, p]` in percent, standardized so that a
/// chance-level ROC scores 50 and a perfect one 100:
/// `50 · (1 + (A − p²/2) / (p − p²/2))`, where `A` is the trapezoidal area
/// up to FPR = p (linear interpolation at the boundary). At `p = 1` this is
/// the plain AUC.
pub fn p_auc(scores: &[(f64, Label)], p: f64) -> Result<f64, EvalError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(EvalError::Malformed {
            what: "max FPR".into(),
            detail: p.to_string(),
        });
    }
    let (normal, anomaly) = split_labels(scores)?;
    let pts = roc_points(&normal, &anomaly);
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= p {
            break;
        }
        if x1 <= p {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_p = y0 + (y1 - y0) * (p - x0) / (x1 - x0);
            area += (p - x0) * (y0 + y_p) / 2.0;
        }
    }
    let chance = p * p / 2.0;
    Ok(50.0 * (1.0 + (area - chance) / (p - chance)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub auc: f64,
    pub p_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdReport {
    pub machine_id: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeReport {
    pub machine_type: String,
    pub family: ModelFamily,
    pub ids: Vec<IdReport>,
    pub mean: Metrics,
}

/// Results of one system on every machine type.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MachineReport {
    pub types: Vec<TypeReport>,
}

impl MachineReport {
    pub fn get(&self, machine_type: &str) -> Option<&TypeReport> {
        self.types.iter().find(|t| t.machine_type == machine_type)
    }
}

/// Unweighted mean of per-machine AUC and pAUC.
pub fn per_type_average(machine_type: &str, ids: &[IdReport]) -> Result<Metrics, EvalError> {
    if ids.is_empty() {
        return Err(EvalError::EmptyType(machine_type.to_string()));
    }
    let n = ids.len() as f64;
    Ok(Metrics {
        auc: ids.iter().map(|i| i.metrics.auc).sum::<f64>() / n,
        p_auc: ids.iter().map(|i| i.metrics.p_auc).sum::<f64>() / n,
    })
}

/// Per machine type, the family with the higher mean AUC; ties go to dense.
pub fn select_mixed(
    dense: &MachineReport,
    conv: &MachineReport,
) -> Result<BTreeMap<String, ModelFamily>, EvalError> {
    let mut types: Vec<&str> = dense.types.iter().chain(&conv.types).map(|t| t.machine_type.as_str()).collect();
    types.sort_unstable();
    types.dedup();
    let mut out = BTreeMap::new();
    for t in types {
        let missing = |family| EvalError::MissingFamily {
            machine_type: t.to_string(),
            family,
        };
        let d = dense.get(t).ok_or_else(|| missing(ModelFamily::Dense))?;
        let c = conv.get(t).ok_or_else(|| missing(ModelFamily::Conv))?;
        let pick = if c.mean.auc > d.mean.auc {
            ModelFamily::Conv
        } else {
            ModelFamily::Dense
        };
        out.insert(t.to_string(), pick);
    }
    Ok(out)
}

type ById<'a> = BTreeMap<&'a str, Vec<(f64, Label)>>;

/// Builds the report of one family from labeled score records. Machine types
/// and ids are sorted.
pub fn evaluate(records: &[ScoreRecord], family: ModelFamily) -> Result<MachineReport, EvalError> {
    let mut grouped: BTreeMap<&str, ById> = BTreeMap::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(EvalError::NonFiniteScore(r.file_id.clone()));
        }
        grouped
            .entry(&r.machine_type)
            .or_default()
            .entry(&r.machine_id)
            .or_default()
            .push((r.score, r.label));
    }
    let mut types = Vec::new();
    for (machine_type, by_id) in grouped {
        let mut ids = Vec::new();
        for (machine_id, scores) in by_id {
            ids.push(IdReport {
                machine_id: machine_id.to_string(),
                metrics: Metrics {
                    auc: auc(&scores)?,
                    p_auc: p_auc(&scores, PAUC_MAX_FPR)?,
                },
            });
        }
        let mean = per_type_average(machine_type, &ids)?;
        types.push(TypeReport {
            machine_type: machine_type.to_string(),
            family,
            ids,
            mean,
        });
    }
    Ok(MachineReport { types })
}

/// Name of the score file of one machine.
pub fn score_csv_name(machine_type: &str, machine_id: &str) -> String {
    format!("anomaly_score_{machine_type}_id_{machine_id}.csv")
}

/// Writes `<filename>,<score>` rows (sorted by file name) for one machine.
pub fn write_score_csv(dir: &Path, machine_type: &str, machine_id: &str, rows: &[(String, f64)]) -> Result<PathBuf, EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut sorted: Vec<&(String, f64)> = rows.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::new();
    for (name, score) in sorted {
        writeln!(out, "{name},{score}").expect("write to string");
    }
    let path = dir.join(score_csv_name(machine_type, machine_id));
    fs::write(&path, out).map_err(io_err(&path))?;
    Ok(path)
}

pub fn read_score_csv(path: &Path) -> Result<Vec<(String, f64)>, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let malformed = || EvalError::Malformed {
                what: path.display().to_string(),
                detail: line.to_string(),
            };
            let (name, score) = line.rsplit_once(',').ok_or_else(malformed)?;
            Ok((name.to_string(), score.trim().parse().map_err(|_| malformed())?))
        })
        .collect()
}

/// Published per-machine results used as comparison columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTable {
    pub systems: Vec<String>,
    /// (machine_type, machine_id or "Average") → one `Metrics` per system.
    pub rows: Vec<((String, String), Vec<Metrics>)>,
}

impl ReferenceTable {
    /// The bundled development-set results of the baseline, dense and conv
    /// systems.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_BASELINE).expect("bundled table parses")
    }

    /// CSV with header `machine_type,machine_id,<sys>_auc,<sys>_pauc,...`.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let malformed = |detail: String| EvalError::Malformed {
            what: "reference table".into(),
            detail,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or_else(|| malformed("empty".into()))?.split(',').collect();
        if header.len() < 4 || !header.len().is_multiple_of(2) || header[..2] != ["machine_type", "machine_id"] {
            return Err(malformed(format!("header {header:?}")));
        }
        let mut systems = Vec::new();
        for pair in header[2..].chunks(2) {
            let sys = pair[0]
                .strip_suffix("_auc")
                .filter(|s| pair[1].strip_suffix("_pauc") == Some(s))
                .ok_or_else(|| malformed(format!("columns {pair:?}")))?;
            systems.push(sys.to_string());
        }
        let mut rows = Vec::new();
        for line in lines {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != header.len() {
                return Err(malformed(line.to_string()));
            }
            let nums = cells[2..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| malformed(line.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            let metrics = nums.chunks(2).map(|m| Metrics { auc: m[0], p_auc: m[1] }).collect();
            rows.push(((cells[0].to_string(), cells[1].to_string()), metrics));
        }
        Ok(Self { systems, rows })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn system_index(&self, name: &str) -> Option<usize> {
        self.systems.iter().position(|s| s == name)
    }

    pub fn get(&self, machine_type: &str, machine_id: &str, system: usize) -> Option<Metrics> {
        self.rows
            .iter()
            .find(|((t, i), _)| t == machine_type && i == machine_id)
            .map(|(_, m)| m[system])
    }

    /// The published per-type rows of one system as a report, with the
    /// printed averages as the type means.
    pub fn system_report(&self, system: usize, family: ModelFamily) -> MachineReport {
        let mut types: Vec<TypeReport> = Vec::new();
        for ((t, id), m) in &self.rows {
            if types.last().map(|r| &r.machine_type) != Some(t) {
                types.push(TypeReport {
                    machine_type: t.clone(),
                    family,
                    ids: Vec::new(),
                    mean: Metrics { auc: f64::NAN, p_auc: f64::NAN },
                });
            }
            let report = types.last_mut().expect("pushed above");
            if id == "Average" {
                report.mean = m[system];
            } else {
                report.ids.push(IdReport {
                    machine_id: id.clone(),
                    metrics: m[system],
                });
            }
        }
        MachineReport { types }
    }
}

/// A result table in the layout of a per-machine comparison: one row per
/// machine id plus an average row per type, the reference system's columns
/// (when given) and the family used for each type.
pub fn render_markdown(report: &MachineReport, reference: Option<(&ReferenceTable, usize)>) -> String {
    let mut out = String::new();
    let ref_name = reference.map(|(t, i)| t.systems[i].clone());
    match &ref_name {
        Some(name) => {
            out.push_str(&format!(
                "| Machine Type | Machine ID | {name} AUC (%) | {name} pAUC (%) | AUC (%) | pAUC (%) | Model |\n"
            ));
            out.push_str("|---|---|---|---|---|---|---|\n");
        }
        None => {
            out.push_str("| Machine Type | Machine ID | AUC (%) | pAUC (%) | Model |\n");
            out.push_str("|---|---|---|---|---|\n");
        }
    }
    for t in &report.types {
        let rows = t
            .ids
            .iter()
            .map(|i| (i.machine_id.as_str(), i.metrics))
            .chain(std::iter::once(("Average", t.mean)));
        for (id, m) in rows {
            let reference_cells = match reference {
                Some((table, sys)) => match table.get(&t.machine_type, id, sys) {
                    Some(r) => format!(" {:.2} | {:.2} |", r.auc, r.p_auc),
                    None => " - | - |".to_string(),
                },
                None => String::new(),
            };
            out.push_str(&format!(
                "| {} | {id} |{reference_cells} {:.2} | {:.2} | {} |\n",
                t.machine_type, m.auc, m.p_auc, t.family
            ));
        }
    }
    out
}

/// The same table as CSV with full precision.
pub fn render_csv(report: &MachineReport, reference: Option<(&ReferenceTable, usize)>) -> String {
    let mut out = String::from("machine_type,machine_id,family,auc,p_auc");
    if let Some((table, sys)) = reference {
        let name = &table.systems[sys];
        out.push_str(&format!(",{name}_auc,{name}_p_auc"));
    }
    out.push('\n');
    for t in &report.types {
        let rows = t
            .ids
            .iter()
            .map(|i| (i.machine_id.as_str(), i.metrics))
            .chain(std::iter::once(("Average", t.mean)));
        for (id, m) in rows {
            out.push_str(&format!("{},{id},{},{},{}", t.machine_type, t.family, m.auc, m.p_auc));
            if let Some((table, sys)) = reference {
                match table.get(&t.machine_type, id, sys) {
                    Some(r) => out.push_str(&format!(",{},{}", r.auc, r.p_auc)),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Reads a table written by [`render_csv`] without reference columns.
pub fn parse_report_csv(text: &str) -> Result<MachineReport, EvalError> {
    let malformed = |detail: &str| EvalError::Malformed {
        what: "report".into(),
        detail: detail.to_string(),
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next() != Some("machine_type,machine_id,family,auc,p_auc") {
        return Err(malformed("header"));
    }
    let mut types: Vec<TypeReport> = Vec::new();
    for line in lines {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 5 {
            return Err(malformed(line));
        }
        let family: ModelFamily = c[2].parse().map_err(|_| malformed(line))?;
        let metrics = Metrics {
            auc: c[3].parse().map_err(|_| malformed(line))?,
            p_auc: c[4].parse().map_err(|_| malformed(line))?,
        };
        if types.last().map(|t| t.machine_type.as_str()) != Some(c[0]) {
            types.push(TypeReport {
                machine_type: c[0].to_string(),
                family,
                ids: Vec::new(),
                mean: Metrics { auc: f64::NAN, p_auc: f64::NAN },
            });
        }
        let t = types.last_mut().expect("pushed above");
        if c[1] == "Average" {
            t.mean = metrics;
        } else {
            t.ids.push(IdReport {
                machine_id: c[1].to_string(),
                metrics,
            });
        }
    }
    if let Some(t) = types.iter().find(|t| t.mean.auc.is_nan()) {
        return Err(malformed(&format!("no Average row for {}", t.machine_type)));
    }
    Ok(MachineReport { types })
}

impl FromStr for Label {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Label::Normal),
            "anomaly" => Ok(Label::Anomaly),
            "unknown" => Ok(Label::Unknown),
            other => Err(EvalError::Malformed {
                what: "label".into(),
                detail: other.to_string(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(normal: &[f64], anomaly: &[f64]) -> Vec<(f64, Label)> {
        normal
            .iter()
            .map(|&s| (s, Label::Normal))
            .chain(anomaly.iter().map(|&s| (s, Label::Anomaly)))
            .collect()
    }

    #[test]
    fn perfect_and_tied_scores() {
        let s = labeled(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(auc(&s).unwrap(), 100.0);
        assert_eq!(p_auc(&s, 0.1).unwrap(), 100.0);
        let ties = labeled(&[0.5; 3], &[0.5; 4]);
        assert_eq!(auc(&ties).unwrap(), 50.0);
        assert!((p_auc(&ties, 0.1).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_labels_are_rejected() {
        let s = labeled(&[1.0], &[]);
        assert!(matches!(auc(&s), Err(EvalError::DegenerateLabels { normal: 1, anomaly: 0 })));
        assert!(p_auc(&s, 0.1).is_err());
    }

    #[test]
    fn bundled_table_has_every_row() {
        let t = ReferenceTable::bundled();
        assert_eq!(t.systems, ["baseline", "dense", "conv"]);
        assert_eq!(t.rows.len(), 23 + 6);
        let dense = t.system_index("dense").unwrap();
        assert_eq!(t.get("ToyCar", "Average", dense).unwrap().auc, 80.79);
    }
}
