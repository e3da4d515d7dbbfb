//! Scoring and error analysis.
//!
//! Each instance contributes one sense item plus one item per non-null
//! role; precision and recall are computed over the union.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conll::Prediction;
use crate::error::{Error, Result};
use crate::vocab::NULL_ROLE;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted, self.gold == 0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold, self.predicted == 0)
    }

    /// `2PR / (P + R)`, or 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    fn add(&mut self, other: Counts) {
        self.correct += other.correct;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }
}

fn ratio(num: usize, den: usize, both_empty: bool) -> f64 {
    if den > 0 {
        num as f64 / den as f64
    } else if both_empty {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sense and role items together.
    pub labeled: Counts,
    pub roles: Counts,
    pub instances: usize,
    pub sense_correct: usize,
}

/// Role-only precision and recall, and sense accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub role_precision: f64,
    pub role_recall: f64,
    pub sense_accuracy: f64,
}

impl EvalReport {
    pub fn precision(&self) -> f64 {
        self.labeled.precision()
    }

    pub fn recall(&self) -> f64 {
        self.labeled.recall()
    }

    pub fn f1(&self) -> f64 {
        self.labeled.f1()
    }

    pub fn decomposition(&self) -> Decomposition {
        Decomposition {
            role_precision: self.roles.precision(),
            role_recall: self.roles.recall(),
            sense_accuracy: ratio(self.sense_correct, self.instances, true),
        }
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let d = self.decomposition();
        let mut out = String::new();
        let _ = writeln!(out, "{:<18} {:>8} {:>8} {:>8}", "metric", "P", "R", "F1");
        let _ = writeln!(
            out,
            "{:<18} {:>8.2} {:>8.2} {:>8.2}",
            "labeled+sense",
            100.0 * self.precision(),
            100.0 * self.recall(),
            100.0 * self.f1()
        );
        let _ = writeln!(
            out,
            "{:<18} {:>8.2} {:>8.2} {:>8.2}",
            "roles",
            100.0 * d.role_precision,
            100.0 * d.role_recall,
            100.0 * self.roles.f1()
        );
        let _ = writeln!(
            out,
            "{:<18} {:>8.2}",
            "sense accuracy",
            100.0 * d.sense_accuracy
        );
        let _ = writeln!(
            out,
            "{:<18} {:>8} {:>8} {:>8}",
            "items (c/p/g)", self.labeled.correct, self.labeled.predicted, self.labeled.gold
        );
        out
    }

    /// One JSON object per metric group, one per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let d = self.decomposition();
        let groups = [
            serde_json::json!({
                "group": "labeled",
                "precision": self.precision(),
                "recall": self.recall(),
                "f1": self.f1(),
                "correct": self.labeled.correct,
                "predicted": self.labeled.predicted,
                "gold": self.labeled.gold,
            }),
            serde_json::json!({
                "group": "decomposed",
                "role_precision": d.role_precision,
                "role_recall": d.role_recall,
                "sense_accuracy": d.sense_accuracy,
                "instances": self.instances,
            }),
        ];
        let mut out = String::new();
        for g in groups {
            out.push_str(&serde_json::to_string(&g)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn check_aligned(gold: &[Prediction], pred: &[Prediction]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Misaligned(format!(
            "{} gold instances, {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.roles.len() != p.roles.len() {
            return Err(Error::Misaligned(format!(
                "instance {i}: {} gold tokens, {} predicted",
                g.roles.len(),
                p.roles.len()
            )));
        }
    }
    Ok(())
}

fn role_counts(gold: &Prediction, pred: &Prediction) -> Counts {
    let mut c = Counts::default();
    for (g, p) in gold.roles.iter().zip(&pred.roles) {
        c.gold += g.is_some() as usize;
        c.predicted += p.is_some() as usize;
        c.correct += (g.is_some() && g == p) as usize;
    }
    c
}

pub fn labeled_f1(gold: &[Prediction], pred: &[Prediction]) -> Result<EvalReport> {
    check_aligned(gold, pred)?;
    let mut labeled = Counts::default();
    let mut roles = Counts::default();
    let mut sense_correct = 0;
    for (g, p) in gold.iter().zip(pred) {
        let rc = role_counts(g, p);
        let sense_ok = (g.sense == p.sense) as usize;
        roles.add(rc);
        labeled.add(rc);
        labeled.add(Counts {
            correct: sense_ok,
            predicted: 1,
            gold: 1,
        });
        sense_correct += sense_ok;
    }
    Ok(EvalReport {
        labeled,
        roles,
        instances: gold.len(),
        sense_correct,
    })
}

pub fn decompose(gold: &[Prediction], pred: &[Prediction]) -> Result<Decomposition> {
    Ok(labeled_f1(gold, pred)?.decomposition())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationCounts {
    /// Core roles predicted on more than one token.
    pub unique: usize,
    /// `C-X` without an earlier `X`.
    pub continuation: usize,
    /// `R-X` without any `X`.
    pub reference: usize,
}

impl ViolationCounts {
    pub fn total(&self) -> usize {
        self.unique + self.continuation + self.reference
    }
}

impl std::ops::AddAssign for ViolationCounts {
    fn add_assign(&mut self, o: Self) {
        self.unique += o.unique;
        self.continuation += o.continuation;
        self.reference += o.reference;
    }
}

pub fn is_core_role(label: &str) -> bool {
    matches!(label, "A0" | "A1" | "A2" | "A3" | "A4" | "A5" | "AA")
}

/// Violations within one instance's role sequence.
pub fn instance_violations(roles: &[Option<String>]) -> ViolationCounts {
    let mut v = ViolationCounts::default();
    let mut core: BTreeMap<&str, usize> = BTreeMap::new();
    for label in roles.iter().flatten() {
        if is_core_role(label) {
            *core.entry(label).or_default() += 1;
        }
    }
    v.unique = core.values().filter(|&&c| c >= 2).count();
    for (i, label) in roles.iter().enumerate() {
        let Some(label) = label else { continue };
        if let Some(base) = label.strip_prefix("C-") {
            if !roles[..i].iter().flatten().any(|l| l == base) {
                v.continuation += 1;
            }
        } else if let Some(base) = label.strip_prefix("R-") {
            if !roles.iter().flatten().any(|l| l == base) {
                v.reference += 1;
            }
        }
    }
    v
}

pub fn constraint_violations(pred: &[Prediction]) -> ViolationCounts {
    let mut total = ViolationCounts::default();
    for p in pred {
        total += instance_violations(&p.roles);
    }
    total
}

/// Token-level role matrices restricted to a label subset. Rows are gold
/// labels, columns baseline labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrices {
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    /// Cells where the baseline was wrong and the refined output right.
    pub correction: Vec<Vec<usize>>,
}

fn label(role: &Option<String>) -> &str {
    role.as_deref().unwrap_or(NULL_ROLE)
}

pub fn confusion_and_correction(
    gold: &[Prediction],
    baseline: &[Prediction],
    refined: &[Prediction],
    labels: &[&str],
) -> Result<ConfusionMatrices> {
    check_aligned(gold, baseline)?;
    check_aligned(gold, refined)?;
    let k = labels.len();
    let index = |l: &str| labels.iter().position(|x| *x == l);
    let mut confusion = vec![vec![0; k]; k];
    let mut correction = vec![vec![0; k]; k];
    for ((g, b), r) in gold.iter().zip(baseline).zip(refined) {
        for ((gr, br), rr) in g.roles.iter().zip(&b.roles).zip(&r.roles) {
            let (Some(gi), Some(bi)) = (index(label(gr)), index(label(br))) else {
                continue;
            };
            confusion[gi][bi] += 1;
            if gi != bi && label(rr) == label(gr) {
                correction[gi][bi] += 1;
            }
        }
    }
    Ok(ConfusionMatrices {
        labels: labels.iter().map(|s| s.to_string()).collect(),
        confusion,
        correction,
    })
}

impl ConfusionMatrices {
    pub fn correction_total(&self) -> usize {
        self.correction.iter().flatten().sum()
    }

    fn matrix_csv(&self, m: &[Vec<usize>]) -> String {
        let mut out = format!("gold\\baseline,{}\n", self.labels.join(","));
        for (l, row) in self.labels.iter().zip(m) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "{l},{}", cells.join(","));
        }
        out
    }

    pub fn confusion_csv(&self) -> String {
        self.matrix_csv(&self.confusion)
    }

    pub fn correction_csv(&self) -> String {
        self.matrix_csv(&self.correction)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (title, m) in [
            ("confusion", &self.confusion),
            ("correction", &self.correction),
        ] {
            let _ = writeln!(out, "{title} (rows gold, columns baseline)");
            let _ = write!(out, "{:>8}", "");
            for l in &self.labels {
                let _ = write!(out, " {l:>8}");
            }
            out.push('\n');
            for (l, row) in self.labels.iter().zip(m) {
                let _ = write!(out, "{l:>8}");
                for c in row {
                    let _ = write!(out, " {c:>8}");
                }
                out.push('\n');
            }
        }
        out
    }
}
