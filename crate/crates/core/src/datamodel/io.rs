//! JSON-lines cohort files and trace files.
//!
//! A cohort file starts with one header object followed by one record per
//! instance:
//!
//! ```text
//! {"version":1,"T":24,"D":8,"M_max":20,"E_dim":16,"D_cxr":4,"D_ecg":4}
//! {"id":"i00000","split":"train","label":0,"ts":[[...]],"note_emb":[[...]],"presence":[...],
//!  "cxr":[...],"has_cxr":1,"ecg":[...],"has_ecg":0,"gt_ts":[...],"gt_note":[...]}
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load/save is
//! byte-stable.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{bit, bits, Cohort, CohortMeta, ContextBlock, Dims, Instance, MaskPair, Split, Trace};
use crate::error::{Result, ToeError};
use crate::numerics::DenseMatrix;

pub const COHORT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "M_max")]
    m_max: usize,
    #[serde(rename = "E_dim")]
    e_dim: usize,
    #[serde(rename = "D_cxr")]
    d_cxr: usize,
    #[serde(rename = "D_ecg")]
    d_ecg: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spurious_feature: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    split: Split,
    #[serde(with = "bit")]
    label: bool,
    ts: Vec<Vec<f64>>,
    note_emb: Vec<Vec<f64>>,
    #[serde(with = "bits")]
    presence: Vec<bool>,
    cxr: Vec<f64>,
    #[serde(with = "bit")]
    has_cxr: bool,
    ecg: Vec<f64>,
    #[serde(with = "bit")]
    has_ecg: bool,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_bits")]
    gt_ts: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_bits")]
    gt_note: Option<Vec<bool>>,
}

mod opt_bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<bool>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => super::bits::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<bool>>, D::Error> {
        let raw = Option::<Vec<u8>>::deserialize(d)?;
        raw.map(|v| {
            v.into_iter()
                .map(|b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(serde::de::Error::custom(format!("expected 0 or 1, got {other}"))),
                })
                .collect()
        })
        .transpose()
    }
}

/// Writes `bytes` to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| ToeError::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn record_of(inst: &Instance, split: Split, gt: Option<&MaskPair>) -> Record {
    Record {
        id: inst.id.clone(),
        split,
        label: inst.label,
        ts: inst.ts.to_rows(),
        note_emb: inst.note_emb.to_rows(),
        presence: inst.presence.clone(),
        cxr: inst.context.cxr.clone(),
        has_cxr: inst.context.has_cxr,
        ecg: inst.context.ecg.clone(),
        has_ecg: inst.context.has_ecg,
        gt_ts: gt.map(|g| g.ts.clone()),
        gt_note: gt.map(|g| g.note.clone()),
    }
}

pub(crate) fn cohort_to_string(cohort: &Cohort) -> Result<String> {
    let d = cohort.dims;
    let header = Header {
        version: COHORT_FORMAT_VERSION,
        t: d.t,
        d: d.d,
        m_max: d.m_max,
        e_dim: d.e_dim,
        d_cxr: d.d_cxr,
        d_ecg: d.d_ecg,
        spurious_feature: cohort.meta.spurious_feature,
        config: cohort.meta.config.clone(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for ((inst, &split), gt) in cohort.instances.iter().zip(&cohort.splits).zip(&cohort.ground_truth) {
        out.push_str(&serde_json::to_string(&record_of(inst, split, gt.as_ref()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    write_atomic(path, cohort_to_string(cohort)?.as_bytes())
}

pub fn load_cohort(path: &Path) -> Result<Cohort> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines.next().ok_or(ToeError::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| ToeError::Parse {
        line: 1,
        message: format!("header: {e}"),
    })?;
    if header.version != COHORT_FORMAT_VERSION {
        return Err(ToeError::Parse {
            line: 1,
            message: format!("unsupported format version {}", header.version),
        });
    }
    let dims = Dims {
        t: header.t,
        d: header.d,
        m_max: header.m_max,
        e_dim: header.e_dim,
        d_cxr: header.d_cxr,
        d_ecg: header.d_ecg,
    };
    let mut cohort = Cohort::new(dims);
    cohort.meta = CohortMeta {
        spurious_feature: header.spurious_feature,
        config: header.config,
    };
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| ToeError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let matrix = |rows: &[Vec<f64>], cols: usize, field: &str| {
            DenseMatrix::from_rows(rows, cols).map_err(|e| ToeError::InvalidInstance {
                id: rec.id.clone(),
                field: field.into(),
                message: e.to_string(),
            })
        };
        let ts = matrix(&rec.ts, dims.d, "ts")?;
        let note_emb = matrix(&rec.note_emb, dims.e_dim, "note_emb")?;
        let gt = match (rec.gt_ts, rec.gt_note) {
            (Some(ts), Some(note)) => Some(MaskPair { ts, note }),
            (None, None) => None,
            _ => {
                return Err(ToeError::InvalidInstance {
                    id: rec.id,
                    field: "ground_truth".into(),
                    message: "gt_ts and gt_note must appear together".into(),
                })
            }
        };
        let inst = Instance {
            id: rec.id,
            ts,
            note_emb,
            presence: rec.presence,
            context: ContextBlock {
                cxr: rec.cxr,
                has_cxr: rec.has_cxr,
                ecg: rec.ecg,
                has_ecg: rec.has_ecg,
            },
            label: rec.label,
        };
        cohort.push(inst, rec.split, gt);
    }
    cohort.validate()?;
    Ok(cohort)
}

/// Traces as JSON lines, preceded by `config` as `# ` comment lines.
pub fn write_traces(path: &Path, traces: &[Trace], config: Option<&str>) -> Result<()> {
    let mut out: String = config.map(|c| c.lines().map(|l| format!("# {l}\n")).collect()).unwrap_or_default();
    for t in traces {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_traces(path: &Path) -> Result<Vec<Trace>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ToeError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims {
            t: 2,
            d: 2,
            m_max: 3,
            e_dim: 2,
            d_cxr: 1,
            d_ecg: 1,
        }
    }

    fn instance(id: &str) -> Instance {
        Instance {
            id: id.into(),
            ts: DenseMatrix::from_rows(&[vec![0.1, -2.5], vec![1e-17, 3.0]], 2).unwrap(),
            note_emb: DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![0.3, 0.7], vec![0.0, 0.0]], 2).unwrap(),
            presence: vec![true, true, false],
            context: ContextBlock {
                cxr: vec![0.25],
                has_cxr: true,
                ecg: vec![0.0],
                has_ecg: false,
            },
            label: true,
        }
    }

    #[test]
    fn empty_cohort_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_cohort(&Cohort::new(dims()), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(text, "{\"version\":1,\"T\":2,\"D\":2,\"M_max\":3,\"E_dim\":2,\"D_cxr\":1,\"D_ecg\":1}\n");
    }

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut c = Cohort::new(dims());
        // Zero-norm embedding on a present chunk is legal.
        c.push(instance("a"), Split::Train, None);
        let gt = MaskPair {
            ts: vec![true, false],
            note: vec![false, true, false],
        };
        c.push(instance("b"), Split::Test, Some(gt));
        save_cohort(&c, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        let back = load_cohort(&p).unwrap();
        assert_eq!(back, c);
        let p2 = dir.path().join("c2.jsonl");
        save_cohort(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn ground_truth_selecting_padding_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut c = Cohort::new(dims());
        let gt = MaskPair {
            ts: vec![false, false],
            note: vec![false, false, true],
        };
        c.push(instance("bad-one"), Split::Train, Some(gt));
        fs::write(&p, cohort_to_string(&c).unwrap()).unwrap();
        let err = load_cohort(&p).unwrap_err();
        assert!(err.to_string().contains("bad-one"), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut c = Cohort::new(dims());
        c.push(instance("a"), Split::Train, None);
        let mut text = cohort_to_string(&c).unwrap();
        text.push_str("{\"id\": oops}\n");
        fs::write(&p, text).unwrap();
        match load_cohort(&p).unwrap_err() {
            ToeError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn nonzero_padding_row_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut c = Cohort::new(dims());
        let mut inst = instance("pad");
        inst.note_emb.set(2, 0, 1.0);
        c.push(inst, Split::Train, None);
        fs::write(&p, cohort_to_string(&c).unwrap()).unwrap();
        let err = load_cohort(&p).unwrap_err();
        assert!(matches!(err, ToeError::InvalidInstance { ref field, .. } if field == "note_emb"), "{err}");
    }
}
