//! Signal CSV files: an optional `# hz=<rate>` comment line, a header row
//! naming `ppg` and/or `ecg` (and optionally `t`), then one row per sample.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::preprocess::{Channel, RawRecord};

/// Channels read from one signal file.
#[derive(Clone, Debug, Default)]
pub struct SignalFile<T = f32> {
    pub ppg: Option<RawRecord<T>>,
    pub ecg: Option<RawRecord<T>>,
}

impl<T: Scalar> SignalFile<T> {
    pub fn channel(&self, c: Channel) -> Option<&RawRecord<T>> {
        match c {
            Channel::Ppg => self.ppg.as_ref(),
            Channel::Ecg => self.ecg.as_ref(),
        }
    }
}

fn parse_hz(text: &str) -> Result<Option<f64>> {
    for line in text.lines() {
        let Some(meta) = line.trim().strip_prefix('#') else { continue };
        for item in meta.split([' ', ',', ';']) {
            if let Some(v) = item.trim().strip_prefix("hz=") {
                let hz: f64 = v
                    .parse()
                    .map_err(|_| Error::Input(format!("bad sample rate `{v}` in metadata line")))?;
                return Ok(Some(hz));
            }
        }
    }
    Ok(None)
}

/// Parses signal CSV text. `hz_override` wins over the metadata line; a `t`
/// column is used as a last resort to infer the rate.
pub fn parse_signal_csv<T: Scalar>(text: &str, subject_id: &str, hz_override: Option<f64>) -> Result<SignalFile<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Input(format!("{subject_id}: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (ppg_col, ecg_col, t_col) = (col("ppg"), col("ecg"), col("t"));
    if ppg_col.is_none() && ecg_col.is_none() {
        return Err(Error::Input(format!("{subject_id}: header needs a `ppg` or `ecg` column")));
    }
    let mut ppg = Vec::new();
    let mut ecg = Vec::new();
    let mut ts = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Input(format!("{subject_id}: {e}")))?;
        let get = |c: usize| -> Result<f64> {
            let field = row.get(c).unwrap_or("");
            field
                .parse::<f64>()
                .map_err(|_| Error::Input(format!("{subject_id}: row {}: bad number `{field}`", i + 1)))
        };
        if let Some(c) = ppg_col {
            ppg.push(T::lit(get(c)?));
        }
        if let Some(c) = ecg_col {
            ecg.push(T::lit(get(c)?));
        }
        if let Some(c) = t_col {
            ts.push(get(c)?);
        }
    }
    let hz = match (hz_override, parse_hz(text)?) {
        (Some(hz), _) | (None, Some(hz)) => hz,
        (None, None) if ts.len() >= 2 => (ts.len() - 1) as f64 / (ts[ts.len() - 1] - ts[0]),
        _ => {
            return Err(Error::Input(format!(
                "{subject_id}: sample rate unknown; add `# hz=<rate>` or pass --hz"
            )))
        }
    };
    let build = |samples: Vec<T>, ch| RawRecord::new(samples, hz, ch, subject_id);
    Ok(SignalFile {
        ppg: ppg_col.map(|_| build(ppg, Channel::Ppg)).transpose()?,
        ecg: ecg_col.map(|_| build(ecg, Channel::Ecg)).transpose()?,
    })
}

pub fn read_signal_csv<T: Scalar>(path: &Path, hz_override: Option<f64>) -> Result<SignalFile<T>> {
    let text = fs::read_to_string(path)?;
    let subject = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "recording".into());
    parse_signal_csv(&text, &subject, hz_override)
}

/// Writes equally long channels with a `# hz=` metadata line.
pub fn write_signal_csv<T: Scalar>(path: &Path, hz: f64, ppg: Option<&[T]>, ecg: Option<&[T]>) -> Result<()> {
    let n = ppg.or(ecg).map(|s| s.len()).unwrap_or(0);
    if ppg.is_some_and(|p| p.len() != n) || ecg.is_some_and(|e| e.len() != n) {
        return Err(Error::Input("channels differ in length".into()));
    }
    let mut out = String::new();
    out.push_str(&format!("# hz={hz}\n"));
    let cols: Vec<&str> = [ppg.map(|_| "ppg"), ecg.map(|_| "ecg")].into_iter().flatten().collect();
    out.push_str(&cols.join(","));
    out.push('\n');
    for i in 0..n {
        let vals: Vec<String> = [ppg, ecg].into_iter().flatten().map(|c| format!("{}", c[i])).collect();
        out.push_str(&vals.join(","));
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
