use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{AnswerClass, QType, VqaSample};
use super::metrics::{score_closed_exact, score_open_recall};
use super::Tokenizer;
use crate::error::{Error, Result};
use crate::model::forward::generate_greedy;
use crate::model::ModelWeights;
use crate::parallel::{self, Execution};
use crate::prompts::pipeline::{test_time_summary, InferenceOptions};
use crate::prompts::{PromptBank, VocabularyIndex};

/// Which prompt components took part in an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalFlags {
    pub use_ap: bool,
    pub use_tp: bool,
    pub use_tto: bool,
}

impl EvalFlags {
    pub const FULL: Self = Self {
        use_ap: true,
        use_tp: true,
        use_tto: true,
    };
    pub const AP_TP: Self = Self {
        use_ap: true,
        use_tp: true,
        use_tto: false,
    };
    pub const AP: Self = Self {
        use_ap: true,
        use_tp: false,
        use_tto: false,
    };

    pub fn label(self) -> &'static str {
        match (self.use_ap, self.use_tp, self.use_tto) {
            (true, true, true) => "AP+TP+TTO",
            (true, true, false) => "AP+TP",
            (true, false, false) => "AP",
            _ => "custom",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub n: usize,
    /// Mean exact match over closed questions, if any.
    pub closed_exact: Option<f64>,
    pub n_closed: usize,
    /// Mean token recall over open questions, if any.
    pub open_recall: Option<f64>,
    pub n_open: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub flags: EvalFlags,
    pub label: String,
    pub overall: GroupScore,
    pub per_qtype: BTreeMap<String, GroupScore>,
    pub config_hash: String,
}

#[derive(Default)]
struct Acc {
    n: usize,
    closed: Vec<f64>,
    open: Vec<f64>,
}

impl Acc {
    fn finish(self) -> GroupScore {
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        GroupScore {
            n: self.n,
            closed_exact: mean(&self.closed),
            n_closed: self.closed.len(),
            open_recall: mean(&self.open),
            n_open: self.open.len(),
        }
    }
}

/// SHA-256 over an arbitrary textual configuration description.
pub fn config_hash(description: &str) -> String {
    format!("{:x}", Sha256::digest(description.as_bytes()))
}

/// Scores `predictions[i]` against `samples[i]`. Aggregates are plain
/// means accumulated in sample order.
pub fn score_predictions(
    samples: &[VqaSample],
    predictions: &[String],
    flags: EvalFlags,
    config_hash: String,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    if samples.len() != predictions.len() {
        return Err(Error::Contract(format!(
            "{} samples but {} predictions",
            samples.len(),
            predictions.len()
        )));
    }
    let mut overall = Acc::default();
    let mut groups: BTreeMap<String, Acc> = BTreeMap::new();
    for (s, p) in samples.iter().zip(predictions) {
        let g = groups.entry(s.qtype.name().to_string()).or_default();
        g.n += 1;
        overall.n += 1;
        match s.answer_class {
            AnswerClass::Closed => {
                let v = score_closed_exact(p, &s.answer);
                g.closed.push(v);
                overall.closed.push(v);
            }
            AnswerClass::Open => {
                let v = score_open_recall(p, &s.answer)?;
                g.open.push(v);
                overall.open.push(v);
            }
        }
    }
    Ok(EvalReport {
        flags,
        label: flags.label().to_string(),
        overall: overall.finish(),
        per_qtype: groups.into_iter().map(|(k, v)| (k, v.finish())).collect(),
        config_hash,
    })
}

/// Greedy answers for every sample. Test-time optimisation runs once per
/// distinct image and is shared by that image's questions.
pub fn predict(
    weights: &ModelWeights,
    bank: &PromptBank,
    index: Option<&VocabularyIndex>,
    samples: &[VqaSample],
    flags: EvalFlags,
    opts: &InferenceOptions,
    exec: Execution,
) -> Result<Vec<String>> {
    let tok = Tokenizer::new();
    let mut opts = *opts;
    opts.flags.adaption = flags.use_ap;
    opts.flags.prefix = flags.use_tp;
    opts.use_tto = flags.use_tto;

    let mut summaries: HashMap<&str, Vec<f64>> = HashMap::new();
    if flags.use_tto {
        let index = index.ok_or_else(|| {
            Error::Contract("test-time optimisation requested without a vocabulary".into())
        })?;
        let mut firsts: Vec<&VqaSample> = Vec::new();
        for s in samples {
            if !firsts.iter().any(|f| f.image_id == s.image_id) {
                firsts.push(s);
            }
        }
        let traces = parallel::map(exec, &firsts, |s| {
            test_time_summary(weights, index, &tok, &s.image, &opts)
        });
        for (s, t) in firsts.iter().zip(traces) {
            summaries.insert(s.image_id.as_str(), t?.summary);
        }
    }
    parallel::map(exec, samples, |s| {
        let summary = summaries.get(s.image_id.as_str()).map(Vec::as_slice);
        let ids = generate_greedy(
            weights,
            bank,
            &s.image,
            &s.question_ids,
            summary,
            opts.flags,
            opts.max_new,
        )?;
        Ok(tok.decode(&ids))
    })
    .into_iter()
    .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    weights: &ModelWeights,
    bank: &PromptBank,
    index: Option<&VocabularyIndex>,
    samples: &[VqaSample],
    flags: EvalFlags,
    opts: &InferenceOptions,
    config_hash: String,
    exec: Execution,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let preds = predict(weights, bank, index, samples, flags, opts, exec)?;
    score_predictions(samples, &preds, flags, config_hash)
}

/// Overall closed exact match and open recall, zero where absent.
pub fn headline(report: &EvalReport) -> (f64, f64) {
    (
        report.overall.closed_exact.unwrap_or(0.0),
        report.overall.open_recall.unwrap_or(0.0),
    )
}

impl QType {
    pub fn all() -> [QType; 5] {
        [
            QType::View,
            QType::Visibility,
            QType::Quality,
            QType::Feasibility,
            QType::Guidance,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate::{generate_dataset, Split, SyntheticSpec};

    fn test_split() -> Vec<VqaSample> {
        let spec = SyntheticSpec {
            train_images: 2,
            val_images: 1,
            test_images: 40,
            ..SyntheticSpec::default()
        };
        generate_dataset(&spec, Execution::Sequential)
            .unwrap()
            .split(Split::Test)
    }

    #[test]
    fn oracle_predictions_score_one() {
        let s = test_split();
        let preds: Vec<String> = s.iter().map(|x| x.answer.clone()).collect();
        let r = score_predictions(&s, &preds, EvalFlags::FULL, config_hash("x")).unwrap();
        assert_eq!(r.overall.closed_exact, Some(1.0));
        assert_eq!(r.overall.open_recall, Some(1.0));
        assert_eq!(r.per_qtype.len(), 5);
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn constant_yes_on_yes_no_questions_matches_label_rate() {
        let s: Vec<VqaSample> = test_split()
            .into_iter()
            .filter(|x| x.answer == "yes" || x.answer == "no")
            .collect();
        let preds = vec!["yes".to_string(); s.len()];
        let r = score_predictions(&s, &preds, EvalFlags::AP, String::new()).unwrap();
        let rate = s.iter().filter(|x| x.answer == "yes").count() as f64 / s.len() as f64;
        assert!((r.overall.closed_exact.unwrap() - rate).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_the_scalar_mean() {
        let s = test_split();
        let preds: Vec<String> = s
            .iter()
            .enumerate()
            .map(|(i, x)| if i % 3 == 0 { "shift".into() } else { x.answer.clone() })
            .collect();
        let r = score_predictions(&s, &preds, EvalFlags::AP, String::new()).unwrap();
        let (mut c, mut nc, mut o, mut no) = (0.0, 0, 0.0, 0);
        for (x, p) in s.iter().zip(&preds) {
            if x.answer_class == AnswerClass::Closed {
                c += score_closed_exact(p, &x.answer);
                nc += 1;
            } else {
                o += score_open_recall(p, &x.answer).unwrap();
                no += 1;
            }
        }
        assert_eq!(r.overall.closed_exact.unwrap(), c / nc as f64);
        assert_eq!(r.overall.open_recall.unwrap(), o / no as f64);
        assert!(score_predictions(&[], &[], EvalFlags::AP, String::new()).is_err());
    }
}
