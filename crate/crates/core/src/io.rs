//! On-disk formats: binary volumes and checkpoints, and the comma-separated
//! bag manifest, feature table, truth sidecar, candidate list and predictions.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::Candidate;
use crate::mil::{BagPrediction, InstanceBag, Payload};
use crate::module::NamedArray;
use crate::preprocess::Volume;
use crate::synth::SynthBag;

pub const VOLUME_MAGIC: &[u8; 4] = b"VOX3";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NSAT";
pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const TRUTH_FILE: &str = "truth.csv";
const MANIFEST_HEADER: &str = "bag_id,instance_ref,label";
const TRUTH_HEADER: &str = "bag_id,instance_index,key,label";
const CANDIDATE_HEADER: &str = "seriesuid,x_mm,y_mm,z_mm,score,truth,noduleid";
const PREDICTION_HEADER: &str = "bag_id,instance_index,probability";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)),
            });
        }
        let at = self.pos;
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse {
                offset: at,
                msg: format!("unsupported version {version}"),
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Voxels and spacings are stored as `f32`.
pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 4 * v.voxels().len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    for &x in v.voxels() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(VOLUME_MAGIC)?;
    let dims_at = r.pos;
    let dims = [r.u32("nx")? as usize, r.u32("ny")? as usize, r.u32("nz")? as usize];
    let spacing_at = r.pos;
    let spacing = [r.f32("sx")? as f64, r.f32("sy")? as f64, r.f32("sz")? as f64];
    if dims.contains(&0) {
        return Err(Error::Parse {
            offset: dims_at,
            msg: format!("zero dimension in {dims:?}"),
        });
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Parse {
            offset: spacing_at,
            msg: format!("non-positive spacing {spacing:?}"),
        });
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Parse {
            offset: dims_at,
            msg: "voxel count overflows".into(),
        })?;
    let mut voxels = Vec::with_capacity(n.min(bytes.len() / 4));
    for _ in 0..n {
        voxels.push(r.f32("voxel data")? as f64);
    }
    r.finish()?;
    Volume::new(dims, spacing, voxels)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    Ok(fs::write(path, encode_volume(v))?)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

/// Named `f64` arrays: magic, version, entry count, then per entry the name
/// length and bytes, rank, dims and data.
pub fn encode_checkpoint(entries: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &e.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(CHECKPOINT_MAGIC)?;
    let count = r.u32("entry count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            msg: "entry name is not UTF-8".into(),
        })?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let left = (bytes.len() - r.pos) / 8;
        let n = match n {
            Some(n) if n <= left => n,
            _ => {
                return Err(Error::Parse {
                    offset: r.pos,
                    msg: format!("entry {name:?} of shape {shape:?} exceeds the remaining data"),
                })
            }
        };
        let data = (0..n).map(|_| r.f64("entry data")).collect::<Result<Vec<_>>>()?;
        out.push(NamedArray { name, shape, data });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_checkpoint(path: &Path, entries: &[NamedArray]) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(entries))?)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedArray>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Non-empty data lines of a text file after its header, with 1-based line
/// numbers. A header mismatch is an error.
fn data_lines<'a>(path: &Path, text: &'a str, header: &str) -> Result<Vec<(usize, &'a str)>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((_, h)) => return Err(record(path, 1, format!("expected header {header:?}, got {h:?}"))),
        None => return Err(record(path, 1, format!("empty file, expected header {header:?}"))),
    }
    Ok(lines.filter(|(_, l)| !l.trim().is_empty()).collect())
}

fn record(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Record {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn fields<'a>(path: &Path, line: usize, text: &'a str, min: usize, max: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = text.split(',').map(str::trim).collect();
    if f.len() < min || f.len() > max {
        return Err(record(path, line, format!("expected {min}..={max} fields, got {}", f.len())));
    }
    Ok(f)
}

fn number<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| record(path, line, format!("invalid {what} {field:?}")))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub bag_id: String,
    /// Feature-table row index or volume file path.
    pub instance_ref: String,
    /// `None` for an ambiguous (`?`) instance.
    pub label: Option<u8>,
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<Vec<ManifestRow>> {
    data_lines(path, text, MANIFEST_HEADER)?
        .into_iter()
        .map(|(n, l)| {
            let f = fields(path, n, l, 3, 3)?;
            if f[0].is_empty() || f[1].is_empty() {
                return Err(record(path, n, "empty bag id or instance reference"));
            }
            let label = match f[2] {
                "0" => Some(0),
                "1" => Some(1),
                "?" => None,
                other => return Err(record(path, n, format!("label must be 0, 1 or ?, got {other:?}"))),
            };
            Ok(ManifestRow {
                bag_id: f[0].to_string(),
                instance_ref: f[1].to_string(),
                label,
            })
        })
        .collect()
}

pub fn format_manifest(rows: &[ManifestRow]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for r in rows {
        let label = r.label.map_or("?".to_string(), |l| l.to_string());
        writeln!(s, "{},{},{}", r.bag_id, r.instance_ref, label).expect("string write");
    }
    s
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    parse_manifest(path, &fs::read_to_string(path)?)
}

/// One feature vector per line, no header. Row `i` is instance reference `i`.
pub fn parse_features(path: &Path, text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = l
            .split(',')
            .map(|f| number::<f64>(path, i + 1, f.trim(), "feature value"))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(record(path, i + 1, format!("expected {} values, got {}", first.len(), row.len())));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn format_features(rows: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Groups manifest rows into bags in order of first appearance, resolving
/// numeric references against `features` and anything else as a volume file
/// relative to `base`.
pub fn assemble_bags(rows: &[ManifestRow], features: Option<&[Vec<f64>]>, base: &Path) -> Result<Vec<InstanceBag>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&ManifestRow>> = HashMap::new();
    for r in rows {
        groups
            .entry(r.bag_id.as_str())
            .or_insert_with(|| {
                order.push(r.bag_id.as_str());
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|id| {
            let members = &groups[id];
            let instances = members
                .iter()
                .map(|r| match (r.instance_ref.parse::<usize>(), features) {
                    (Ok(i), Some(table)) => table
                        .get(i)
                        .map(|v| Payload::Features(v.clone()))
                        .ok_or_else(|| Error::Contract(format!("feature row {i} out of range ({} rows)", table.len()))),
                    (Ok(i), None) => Err(Error::Contract(format!("feature row {i} referenced without a feature table"))),
                    (Err(_), _) => read_volume(&base.join(&r.instance_ref)).map(Payload::Voxels),
                })
                .collect::<Result<Vec<_>>>()?;
            let labels = members.iter().map(|r| r.label.unwrap_or(0)).collect();
            let mask = members.iter().map(|r| r.label.is_some()).collect();
            InstanceBag::new(id, instances, labels, mask)
        })
        .collect()
}

/// Reads `manifest.csv` (and `features.csv` when present) from a dataset
/// directory.
pub fn load_dataset(dir: &Path) -> Result<Vec<InstanceBag>> {
    let rows = read_manifest(&dir.join(MANIFEST_FILE))?;
    let feature_path = dir.join(FEATURES_FILE);
    let features = if feature_path.exists() {
        Some(parse_features(&feature_path, &fs::read_to_string(&feature_path)?)?)
    } else {
        None
    };
    assemble_bags(&rows, features.as_deref(), dir)
}

/// Writes a generated dataset: manifest, feature table or `volumes/*.vox`,
/// and the truth sidecar with latent keys and full labels.
pub fn write_dataset(dir: &Path, bags: &[SynthBag]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    let mut features = Vec::new();
    let mut truth = format!("{TRUTH_HEADER}\n");
    let volumes = dir.join("volumes");
    for sb in bags {
        let b = &sb.bag;
        for (i, p) in b.instances.iter().enumerate() {
            let instance_ref = match p {
                Payload::Features(v) => {
                    features.push(v.clone());
                    (features.len() - 1).to_string()
                }
                Payload::Voxels(v) => {
                    fs::create_dir_all(&volumes)?;
                    let name = format!("volumes/{}_{i}.vox", b.id);
                    write_volume(&dir.join(&name), v)?;
                    name
                }
            };
            rows.push(ManifestRow {
                bag_id: b.id.clone(),
                instance_ref,
                label: b.mask[i].then_some(b.labels[i]),
            });
            writeln!(truth, "{},{i},{},{}", b.id, sb.keys[i], b.labels[i]).expect("string write");
        }
    }
    fs::write(dir.join(MANIFEST_FILE), format_manifest(&rows))?;
    if !features.is_empty() {
        fs::write(dir.join(FEATURES_FILE), format_features(&features))?;
    }
    fs::write(dir.join(TRUTH_FILE), truth)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthRow {
    pub bag_id: String,
    pub instance_index: usize,
    pub key: usize,
    pub label: u8,
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRow>> {
    let text = fs::read_to_string(path)?;
    data_lines(path, &text, TRUTH_HEADER)?
        .into_iter()
        .map(|(n, l)| {
            let f = fields(path, n, l, 4, 4)?;
            Ok(TruthRow {
                bag_id: f[0].to_string(),
                instance_index: number(path, n, f[1], "instance index")?,
                key: number(path, n, f[2], "key")?,
                label: number(path, n, f[3], "label")?,
            })
        })
        .collect()
}

pub fn parse_candidates(path: &Path, text: &str) -> Result<Vec<Candidate>> {
    data_lines(path, text, CANDIDATE_HEADER)?
        .into_iter()
        .map(|(n, l)| {
            let f = fields(path, n, l, 6, 7)?;
            let truth = match f[5] {
                "0" => false,
                "1" => true,
                other => return Err(record(path, n, format!("truth must be 0 or 1, got {other:?}"))),
            };
            let nodule_id = f.get(6).filter(|s| !s.is_empty()).map(|s| s.to_string());
            let c = Candidate {
                series_id: f[0].to_string(),
                position: [
                    number(path, n, f[1], "x_mm")?,
                    number(path, n, f[2], "y_mm")?,
                    number(path, n, f[3], "z_mm")?,
                ],
                score: number(path, n, f[4], "score")?,
                truth,
                nodule_id,
            };
            c.validate().map_err(|e| record(path, n, e.to_string()))?;
            Ok(c)
        })
        .collect()
}

pub fn format_candidates(cands: &[Candidate]) -> String {
    let mut s = format!("{CANDIDATE_HEADER}\n");
    for c in cands {
        writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{},{}",
            c.series_id,
            c.position[0],
            c.position[1],
            c.position[2],
            c.score,
            u8::from(c.truth),
            c.nodule_id.as_deref().unwrap_or("")
        )
        .expect("string write");
    }
    s
}

pub fn read_candidates(path: &Path) -> Result<Vec<Candidate>> {
    parse_candidates(path, &fs::read_to_string(path)?)
}

pub fn format_predictions(preds: &[BagPrediction]) -> String {
    let mut s = format!("{PREDICTION_HEADER}\n");
    for p in preds {
        for (i, prob) in p.probabilities.iter().enumerate() {
            writeln!(s, "{},{i},{prob:?}", p.id).expect("string write");
        }
    }
    s
}

/// `(bag_id, instance_index, probability)` rows.
pub fn read_predictions(path: &Path) -> Result<Vec<(String, usize, f64)>> {
    let text = fs::read_to_string(path)?;
    data_lines(path, &text, PREDICTION_HEADER)?
        .into_iter()
        .map(|(n, l)| {
            let f = fields(path, n, l, 3, 3)?;
            let p: f64 = number(path, n, f[2], "probability")?;
            if !(0.0..=1.0).contains(&p) {
                return Err(record(path, n, format!("probability {p} outside [0, 1]")));
            }
            Ok((f[0].to_string(), number(path, n, f[1], "instance index")?, p))
        })
        .collect()
}

/// `key=value` lines.
pub fn format_report(entries: &[(String, f64)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Joins predictions with manifest labels by bag id and position within the
/// bag; returns scores and labels of the supervised instances.
pub fn join_predictions(
    preds: &[(String, usize, f64)],
    manifest: &[ManifestRow],
    manifest_path: &Path,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut position: HashMap<&str, usize> = HashMap::new();
    let mut labels: HashMap<(&str, usize), Option<u8>> = HashMap::new();
    for r in manifest {
        let i = position.entry(r.bag_id.as_str()).or_insert(0);
        labels.insert((r.bag_id.as_str(), *i), r.label);
        *i += 1;
    }
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for (bag, i, p) in preds {
        match labels.get(&(bag.as_str(), *i)) {
            Some(Some(l)) => {
                scores.push(*p);
                truth.push(*l == 1);
            }
            Some(None) => {}
            None => {
                return Err(Error::Contract(format!(
                    "prediction for {bag}[{i}] has no row in {}",
                    manifest_path.display()
                )))
            }
        }
    }
    Ok((scores, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_bags, PayloadMode, SynthSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng) -> Volume {
        let dims = [rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6)];
        let n = dims.iter().product();
        Volume::new(
            dims,
            [0.5, 1.25, 2.0],
            (0..n).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect(),
        )
        .unwrap()
    }

    fn parse_offset(e: Error) -> usize {
        match e {
            Error::Parse { offset, .. } => offset,
            other => panic!("expected a parse error, got {other}"),
        }
    }

    #[test]
    fn volume_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let v = random_volume(&mut rng);
            assert_eq!(decode_volume(&encode_volume(&v)).unwrap(), v);
        }
    }

    #[test]
    fn volume_parse_errors_name_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bytes = encode_volume(&random_volume(&mut rng));
        assert_eq!(parse_offset(decode_volume(&bytes[..bytes.len() - 2]).unwrap_err()), bytes.len() - 4);
        assert_eq!(parse_offset(decode_volume(&bytes[..10]).unwrap_err()), 8);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(parse_offset(decode_volume(&bad).unwrap_err()), 0);
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(parse_offset(decode_volume(&bad).unwrap_err()), 4);
        let mut long = bytes;
        long.push(0);
        assert_eq!(parse_offset(decode_volume(&long).unwrap_err()), long.len() - 1);
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let entries = vec![
            NamedArray {
                name: "sat.layer0.group0.W".into(),
                shape: vec![2, 2],
                data: vec![1.0, -2.5, 3.25, 1e-300],
            },
            NamedArray {
                name: "adam.step".into(),
                shape: vec![],
                data: vec![7.0],
            },
        ];
        let bytes = encode_checkpoint(&entries);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), entries);
        assert_eq!(parse_offset(decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err()), bytes.len() - 8);
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let rows = vec![
            ManifestRow {
                bag_id: "p1".into(),
                instance_ref: "0".into(),
                label: Some(1),
            },
            ManifestRow {
                bag_id: "p1".into(),
                instance_ref: "1".into(),
                label: None,
            },
        ];
        let p = Path::new("m.csv");
        assert_eq!(parse_manifest(p, &format_manifest(&rows)).unwrap(), rows);
        let err = parse_manifest(p, "bag_id,instance_ref,label\np1,0,1\np1,1,2\n").unwrap_err();
        assert!(matches!(err, Error::Record { line: 3, .. }), "{err}");
        assert!(parse_manifest(p, "wrong\n").is_err());
    }

    #[test]
    fn candidates_without_nodule_id_parse() {
        let text = "seriesuid,x_mm,y_mm,z_mm,score,truth,noduleid\ns1,1.0,2.0,3.0,0.5,0\ns1,1,2,3,0.9,1,A\ns2,0,0,0,0.1,0,\n";
        let cands = parse_candidates(Path::new("c.csv"), text).unwrap();
        assert_eq!(cands.len(), 3);
        assert_eq!(cands[0].nodule_id, None);
        assert_eq!(cands[1].nodule_id.as_deref(), Some("A"));
        assert_eq!(parse_candidates(Path::new("c.csv"), &format_candidates(&cands)).unwrap(), cands);
        let missing = "seriesuid,x_mm,y_mm,z_mm,score,truth,noduleid\ns1,0,0,0,0.5,1\n";
        assert!(matches!(parse_candidates(Path::new("c.csv"), missing), Err(Error::Record { line: 2, .. })));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for payload in [PayloadMode::Feature, PayloadMode::Voxel] {
            let spec = SynthSpec {
                bags: 4,
                n_min: 1,
                n_max: 4,
                payload,
                noise: 0.0,
                ..SynthSpec::default()
            };
            let bags = generate_bags(&spec).unwrap();
            let sub = dir.path().join(format!("{payload:?}"));
            write_dataset(&sub, &bags).unwrap();
            let loaded = load_dataset(&sub).unwrap();
            assert_eq!(loaded.len(), bags.len());
            for (l, b) in loaded.iter().zip(&bags) {
                assert_eq!(l.id, b.bag.id);
                assert_eq!(l.mask, b.bag.mask);
                assert_eq!(l.instances, b.bag.instances);
                for i in (0..l.len()).filter(|&i| l.mask[i]) {
                    assert_eq!(l.labels[i], b.bag.labels[i]);
                }
            }
            let truth = read_truth(&sub.join(TRUTH_FILE)).unwrap();
            assert_eq!(truth.len(), bags.iter().map(|b| b.keys.len()).sum::<usize>());
        }
    }

    #[test]
    fn predictions_join_manifest_labels() {
        let preds = vec![
            BagPrediction::from_logits("a", vec![2.0, -1.0]),
            BagPrediction::from_logits("b", vec![0.0]),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        fs::write(&path, format_predictions(&preds)).unwrap();
        let rows = read_predictions(&path).unwrap();
        assert_eq!(rows.len(), 3);
        let manifest = parse_manifest(Path::new("m"), "bag_id,instance_ref,label\na,0,1\na,1,?\nb,2,0\n").unwrap();
        let (scores, labels) = join_predictions(&rows, &manifest, Path::new("m")).unwrap();
        assert_eq!(labels, vec![true, false]);
        assert_eq!(scores[1], 0.5);
    }
}
