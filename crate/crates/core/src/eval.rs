//! Binary and multiclass metrics plus the JSON/CSV report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::classify::LabelCodec;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Tallies predictions against truth, `true` meaning the positive class.
    pub fn from_predictions(truth: &[bool], predicted: &[bool]) -> Result<Self> {
        check_dim("predictions vs truth", truth.len(), predicted.len())?;
        let mut c = BinaryCounts::default();
        for (t, p) in truth.iter().zip(predicted) {
            match (t, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("accuracy of an empty set".into()));
        }
        Ok((self.tp + self.tn) as f64 / total as f64)
    }
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(c: &BinaryCounts) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    ((tp * tn - fp * fn_) / den.sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// `None` for the starting point above every score.
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub auc: f64,
    /// Starts at (0, 0) and ends at (1, 1).
    pub points: Vec<RocPoint>,
}

/// Threshold sweep over distinct scores (descending); tied scores move together,
/// which makes the trapezoidal area equal the pairwise statistic with ties at ½.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<Roc> {
    check_dim("scores vs labels", positive.len(), scores.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("ROC input contains non-finite scores".into()));
    }
    let p = positive.iter().filter(|x| **x).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Data(format!(
            "ROC needs both classes; got {p} positive and {n} negative samples"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: None, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in count units, normalised once at the end
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 * 0.5;
        points.push(RocPoint {
            threshold: Some(s),
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    Ok(Roc { auc: auc / (p as f64 * n as f64), points })
}

/// K×K counts, rows = true class, columns = predicted class, in codec order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Recognition rate: trace / total.
    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("accuracy of an empty confusion matrix".into()));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in &self.classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(c);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion<S: AsRef<str>>(y_true: &[S], y_pred: &[S], codec: &LabelCodec) -> Result<ConfusionMatrix> {
    check_dim("predictions vs truth", y_true.len(), y_pred.len())?;
    let k = codec.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (t, p) in y_true.iter().zip(y_pred) {
        counts[codec.index(t.as_ref())?][codec.index(p.as_ref())?] += 1;
    }
    Ok(ConfusionMatrix { classes: codec.classes().to_vec(), counts })
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        match p.threshold {
            Some(t) => {
                let _ = writeln!(out, "{t},{},{}", p.fpr, p.tpr);
            }
            None => {
                let _ = writeln!(out, "inf,{},{}", p.fpr, p.tpr);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub positive_class: String,
    pub counts: BinaryCounts,
    pub accuracy: f64,
    pub auc: f64,
    pub mcc: f64,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassMetrics {
    pub recognition_rate: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: Option<String>,
    /// Stage or artifact name → 16-hex-digit content hash.
    pub model_hashes: BTreeMap<String, String>,
}

/// The serialised evaluation report. Field order is fixed by declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub binary: Option<BinaryMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub multiclass: Option<MulticlassMetrics>,
    pub provenance: Provenance,
}

/// Binary report. `scores` are the positive-class scores used for the ROC.
pub fn evaluate_binary<S: AsRef<str>>(
    truth: &[S],
    predicted: &[S],
    scores: &[f64],
    positive_class: &str,
) -> Result<EvalReport> {
    check_dim("scores vs truth", truth.len(), scores.len())?;
    let t: Vec<bool> = truth.iter().map(|s| s.as_ref() == positive_class).collect();
    let p: Vec<bool> = predicted.iter().map(|s| s.as_ref() == positive_class).collect();
    let counts = BinaryCounts::from_predictions(&t, &p)?;
    let roc = roc_auc(scores, &t)?;
    Ok(EvalReport {
        task: Task::Binary,
        samples: truth.len(),
        binary: Some(BinaryMetrics {
            positive_class: positive_class.to_string(),
            counts,
            accuracy: counts.accuracy()?,
            auc: roc.auc,
            mcc: mcc(&counts),
            roc: roc.points,
        }),
        multiclass: None,
        provenance: Provenance::default(),
    })
}

pub fn evaluate_multiclass<S: AsRef<str>>(truth: &[S], predicted: &[S], codec: &LabelCodec) -> Result<EvalReport> {
    let cm = confusion(truth, predicted, codec)?;
    Ok(EvalReport {
        task: Task::Multiclass,
        samples: truth.len(),
        binary: None,
        multiclass: Some(MulticlassMetrics {
            recognition_rate: cm.accuracy()?,
            confusion: cm,
        }),
        provenance: Provenance::default(),
    })
}

impl EvalReport {
    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Headline number: accuracy for binary tasks, recognition rate otherwise.
    pub fn accuracy(&self) -> f64 {
        match (&self.binary, &self.multiclass) {
            (Some(b), _) => b.accuracy,
            (_, Some(m)) => m.recognition_rate,
            _ => f64::NAN,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(context, e.to_string()))
    }

    /// Writes the JSON plus `<stem>.confusion.csv` / `<stem>.roc.csv` siblings.
    pub fn write(&self, path: &Path) -> Result<()> {
        binio::write_file(path, self.to_json().as_bytes())?;
        if let Some(m) = &self.multiclass {
            binio::write_file(&path.with_extension("confusion.csv"), m.confusion.to_csv().as_bytes())?;
        }
        if let Some(b) = &self.binary {
            binio::write_file(&path.with_extension("roc.csv"), roc_csv(&b.roc).as_bytes())?;
        }
        Ok(())
    }
}
