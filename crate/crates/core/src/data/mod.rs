//! Synthetic paired PPG/ECG generation, dataset assembly with subject-wise
//! splits, and the dataset manifest.

mod synth;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use synth::{make_classes, synth_pair, SynthParams, Wave, DEFAULT_WAVES, FIRST_R_S, MIN_DURATION_S, R_WAVE};

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::preprocess::io::{read_signal_csv, write_signal_csv};
use crate::preprocess::{align_pairs, preprocess, Passbands, RawRecord, SignalWindow, TARGET_HZ};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Input(format!("unknown split `{s}`"))),
        }
    }
}

/// Train/val/test shares of the subjects.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| !(f >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "split fractions {parts:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }

    /// Subjects per split: val and test take the floor of their share, train the remainder.
    pub fn counts(&self, subjects: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let share = |f: f64| (f * subjects as f64 + 1e-9).floor() as usize;
        let (val, test) = (share(self.val), share(self.test));
        let train = subjects - val - test;
        for (name, f, n) in [("train", self.train, train), ("val", self.val, val), ("test", self.test, test)] {
            if f > 0.0 && n == 0 {
                return Err(Error::Input(format!(
                    "{subjects} subject(s) are too few for a non-empty {name} split"
                )));
            }
        }
        Ok([train, val, test])
    }
}

/// One aligned window pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T = f32> {
    pub ppg: SignalWindow<T>,
    pub ecg: SignalWindow<T>,
    pub label: Option<String>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset<T = f32> {
    pub examples: Vec<Example<T>>,
}

/// Paired raw recordings of one subject.
#[derive(Clone, Debug)]
pub struct SubjectRecord<T = f32> {
    pub ppg: RawRecord<T>,
    pub ecg: RawRecord<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example<T>> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    /// `(ppg, ecg)` pairs of one split.
    pub fn pairs(&self, split: Split) -> Vec<(SignalWindow<T>, SignalWindow<T>)> {
        self.split(split).map(|e| (e.ppg.clone(), e.ecg.clone())).collect()
    }

    pub fn subjects(&self, split: Split) -> Vec<String> {
        let mut seen = Vec::new();
        for e in self.split(split) {
            if !seen.contains(&e.ppg.source.subject_id) {
                seen.push(e.ppg.source.subject_id.clone());
            }
        }
        seen
    }

    /// Manifest rows `file,start,label,split`; files are `<subject>.csv`.
    pub fn manifest(&self) -> String {
        let mut out = String::from("file,start,label,split\n");
        for e in &self.examples {
            out.push_str(&format!(
                "{}.csv,{},{},{}\n",
                e.ppg.source.subject_id,
                e.ppg.source.start,
                e.label.as_deref().unwrap_or(""),
                e.split
            ));
        }
        out
    }
}

/// Preprocesses every subject and assigns whole subjects to splits.
pub fn assemble<T: Scalar>(
    records: &[SubjectRecord<T>],
    fractions: &SplitFractions,
    seed: u64,
    bands: &Passbands,
) -> Result<Dataset<T>> {
    let mut subjects: Vec<&str> = Vec::new();
    for r in records {
        if r.ppg.subject_id != r.ecg.subject_id {
            return Err(Error::Input(format!(
                "record pairs subject `{}` with `{}`",
                r.ppg.subject_id, r.ecg.subject_id
            )));
        }
        if !subjects.contains(&r.ppg.subject_id.as_str()) {
            subjects.push(&r.ppg.subject_id);
        }
    }
    let [n_train, n_val, _] = fractions.counts(subjects.len())?;
    let mut order = subjects.clone();
    order.shuffle(&mut substream(seed, "data/split"));
    let split_of: HashMap<&str, Split> = order
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (s, split)
        })
        .collect();
    let mut examples = Vec::new();
    for r in records {
        let split = split_of[r.ppg.subject_id.as_str()];
        let (pairs, _) = align_pairs(preprocess(&r.ppg, bands)?, preprocess(&r.ecg, bands)?);
        let label = r.ppg.label.clone().or_else(|| r.ecg.label.clone());
        examples.extend(pairs.into_iter().map(|(ppg, ecg)| Example {
            ppg,
            ecg,
            label: label.clone(),
            split,
        }));
    }
    Ok(Dataset { examples })
}

/// Recipe for a synthetic multi-subject corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub subjects: usize,
    pub duration_s: f64,
    pub noise_std: f64,
    /// Subject `i` gets class `i mod n`, with a fixed base rate instead of a sampled one.
    pub n_classes: Option<usize>,
    pub base_heart_rate_bpm: f64,
    /// Half-width of the uniform per-subject heart-rate jitter in class corpora.
    pub heart_rate_jitter_bpm: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            subjects: 10,
            duration_s: 60.0,
            noise_std: 0.05,
            n_classes: None,
            base_heart_rate_bpm: 65.0,
            heart_rate_jitter_bpm: 3.0,
            seed: 0,
        }
    }
}

/// Generates one record pair per subject; labels are `labels[class]` when classes are requested.
pub fn synth_corpus<T: Scalar>(spec: &CorpusSpec, labels: Option<&[String]>) -> Result<Vec<SubjectRecord<T>>> {
    let mut seeds = substream(spec.seed, "synth/subjects");
    let mut out = Vec::with_capacity(spec.subjects);
    for i in 0..spec.subjects {
        let seed = seeds.next_u64();
        let mut params = SynthParams {
            noise_std: spec.noise_std,
            ..SynthParams::sampled(seed)
        };
        let mut label = None;
        if let Some(n) = spec.n_classes {
            let k = i % n;
            let jitter = (SynthParams::sampled(seed).heart_rate_bpm - 80.0) / 20.0 * spec.heart_rate_jitter_bpm;
            params.heart_rate_bpm = spec.base_heart_rate_bpm + jitter;
            params = make_classes(&params, n)?.swap_remove(k);
            label = Some(match labels {
                Some(l) => l
                    .get(k)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("{} labels for {n} classes", l.len())))?,
                None => k.to_string(),
            });
        }
        let subject = format!("subject{i:03}");
        let (ppg, ecg) = synth_pair::<T>(&params, spec.duration_s, &subject)?;
        out.push(SubjectRecord {
            ppg: ppg.with_label(label.clone()),
            ecg: ecg.with_label(label),
        });
    }
    Ok(out)
}

/// Writes `<subject>.csv` per record plus `manifest.csv` into `dir`.
pub fn write_dataset<T: Scalar>(dir: &Path, records: &[SubjectRecord<T>], dataset: &Dataset<T>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in records {
        write_signal_csv(
            &dir.join(format!("{}.csv", r.ppg.subject_id)),
            r.ppg.sample_rate_hz,
            Some(&r.ppg.samples),
            Some(&r.ecg.samples),
        )?;
    }
    std::fs::write(dir.join("manifest.csv"), dataset.manifest())?;
    Ok(())
}

struct ManifestRow {
    file: String,
    start: usize,
    label: Option<String>,
    split: Split,
}

fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Input(format!("manifest: {e}")))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["file", "start", "label", "split"] {
        return Err(Error::Input("manifest header must be `file,start,label,split`".into()));
    }
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| Error::Input(format!("manifest: {e}")))?;
            let start = r[1]
                .parse()
                .map_err(|_| Error::Input(format!("manifest: bad start `{}`", &r[1])))?;
            Ok(ManifestRow {
                file: r[0].to_string(),
                start,
                label: (!r[2].is_empty()).then(|| r[2].to_string()),
                split: r[3].parse()?,
            })
        })
        .collect()
}

/// Rebuilds a dataset from `manifest.csv` and the signal files next to it.
pub fn read_dataset<T: Scalar>(dir: &Path, hz_override: Option<f64>, bands: &Passbands) -> Result<Dataset<T>> {
    let rows = parse_manifest(&std::fs::read_to_string(dir.join("manifest.csv"))?)?;
    let mut windows: HashMap<String, HashMap<usize, (SignalWindow<T>, SignalWindow<T>)>> = HashMap::new();
    let mut examples = Vec::with_capacity(rows.len());
    let mut seen = HashSet::new();
    for row in rows {
        if !windows.contains_key(&row.file) {
            let file = read_signal_csv::<T>(&dir.join(&row.file), hz_override)?;
            let (Some(ppg), Some(ecg)) = (file.ppg, file.ecg) else {
                return Err(Error::Input(format!("{}: needs both ppg and ecg columns", row.file)));
            };
            let (pairs, _) = align_pairs(preprocess(&ppg, bands)?, preprocess(&ecg, bands)?);
            windows.insert(
                row.file.clone(),
                pairs.into_iter().map(|(p, e)| (p.source.start, (p, e))).collect(),
            );
        }
        if !seen.insert((row.file.clone(), row.start)) {
            return Err(Error::Input(format!("manifest lists {} offset {} twice", row.file, row.start)));
        }
        let (ppg, ecg) = windows[&row.file].get(&row.start).cloned().ok_or_else(|| {
            Error::Input(format!("{} has no window starting at sample {}", row.file, row.start))
        })?;
        examples.push(Example {
            ppg,
            ecg,
            label: row.label,
            split: row.split,
        });
    }
    Ok(Dataset { examples })
}

/// Sample count of `duration_s` seconds at the working rate.
pub fn samples_for(duration_s: f64) -> usize {
    (duration_s * TARGET_HZ).round() as usize
}
