//! Sample manifests: the on-disk listing that makes experiments reproducible.
//!
//! File format: optional `# key=value` header lines, then the column header
//! `left_path,right_path,label,split,source_id` and one row per sample.
//! Labels are `0` (real) / `1` (gan) on disk and ±1 in memory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ComposeMode, Split, LABEL_GAN, LABEL_REAL};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub left_path: PathBuf,
    pub right_path: PathBuf,
    pub label: i8,
    pub split: Split,
    pub source_id: String,
}

#[derive(Debug, Clone)]
pub struct SampleManifest {
    pub rows: Vec<ManifestRow>,
    /// Recorded at build time so evaluation cannot silently compose inputs
    /// differently than training did.
    pub compose_mode: ComposeMode,
}

impl SampleManifest {
    pub fn count(&self, split: Split, label: i8) -> usize {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.label == label)
            .count()
    }

    pub fn split_rows(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert(row.source_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate source_id {:?}",
                    row.source_id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("# compose_mode={}\n", self.compose_mode.as_str()));
        out.push_str("left_path,right_path,label,split,source_id\n");
        for row in &self.rows {
            let label = if row.label == LABEL_GAN { 1 } else { 0 };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.left_path.display(),
                row.right_path.display(),
                label,
                row.split.as_str(),
                row.source_id
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Reads a manifest and checks that every referenced image exists.
pub fn load_manifest(path: &Path) -> Result<SampleManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
    let mut compose_mode = ComposeMode::default();
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                if k.trim() == "compose_mode" {
                    compose_mode = ComposeMode::parse(v.trim())?;
                }
            }
            continue;
        }
        if !saw_header {
            if line != "left_path,right_path,label,split,source_id" {
                return Err(Error::Manifest(format!(
                    "line {}: expected column header, got {line:?}",
                    ln + 1
                )));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Manifest(format!(
                "line {}: expected 5 fields, got {}",
                ln + 1,
                fields.len()
            )));
        }
        let label = match fields[2] {
            "1" => LABEL_GAN,
            "0" => LABEL_REAL,
            other => {
                return Err(Error::Manifest(format!(
                    "line {}: label must be 0 or 1, got {other:?}",
                    ln + 1
                )))
            }
        };
        rows.push(ManifestRow {
            left_path: PathBuf::from(fields[0]),
            right_path: PathBuf::from(fields[1]),
            label,
            split: Split::parse(fields[3])?,
            source_id: fields[4].to_string(),
        });
    }
    if !saw_header {
        return Err(Error::Manifest("missing column header".into()));
    }
    let manifest = SampleManifest { rows, compose_mode };
    manifest.validate()?;
    for row in &manifest.rows {
        for p in [&row.left_path, &row.right_path] {
            if !p.exists() {
                return Err(Error::Manifest(format!(
                    "{}: referenced file {} does not exist",
                    row.source_id,
                    p.display()
                )));
            }
        }
    }
    Ok(manifest)
}

/// One eye-pair found on disk, before labeling.
#[derive(Debug, Clone)]
struct PairEntry {
    source_id: String,
    left: PathBuf,
    right: PathBuf,
}

/// Finds `<id>_L.png` / `<id>_R.png` pairs in a directory, sorted by id.
fn scan_pairs(dir: &Path) -> Result<Vec<PairEntry>> {
    let mut lefts = std::collections::BTreeMap::new();
    let mut rights = std::collections::BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(id) = name.strip_suffix("_L.png") {
            lefts.insert(id.to_string(), path.clone());
        } else if let Some(id) = name.strip_suffix("_R.png") {
            rights.insert(id.to_string(), path.clone());
        }
    }
    let pairs: Vec<PairEntry> = lefts
        .into_iter()
        .filter_map(|(id, left)| {
            rights.get(&id).map(|right| PairEntry {
                source_id: id,
                left,
                right: right.clone(),
            })
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Manifest(format!(
            "no <id>_L.png / <id>_R.png pairs under {}",
            dir.display()
        )));
    }
    Ok(pairs)
}

/// Builds a labeled manifest from two directories of iris-pair crops.
///
/// `ratio = Some((r_gan, r_real))` subsamples both classes to the largest
/// population matching that ratio (each class deterministically shuffled by
/// `seed` first); `None` keeps everything. The train/test split then takes
/// the first `floor(n * train_fraction)` of each class.
pub fn build_manifest(
    real_dir: &Path,
    gan_dir: &Path,
    ratio: Option<(u32, u32)>,
    train_fraction: f64,
    seed: u64,
    compose_mode: ComposeMode,
) -> Result<SampleManifest> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must be in [0,1], got {train_fraction}"
        )));
    }
    let real = scan_pairs(real_dir)?;
    let gan = scan_pairs(gan_dir)?;

    let (n_gan, n_real) = match ratio {
        None => (gan.len(), real.len()),
        Some((rg, rr)) => {
            if rg == 0 || rr == 0 {
                return Err(Error::InvalidConfig("ratio parts must be positive".into()));
            }
            let scale = (gan.len() as f64 / rg as f64).min(real.len() as f64 / rr as f64);
            let n_gan = (scale * rg as f64).floor() as usize;
            let n_real = (scale * rr as f64).floor() as usize;
            if n_gan == 0 || n_real == 0 {
                return Err(Error::InsufficientSamples {
                    requested: format!("{rg}:{rr}"),
                    achievable: format!("{}:{}", gan.len(), real.len()),
                });
            }
            (n_gan, n_real)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut take = |mut pool: Vec<PairEntry>, n: usize, label: i8| {
        pool.shuffle(&mut rng);
        pool.truncate(n);
        let train_count = (n as f64 * train_fraction).floor() as usize;
        pool.into_iter()
            .enumerate()
            .map(|(i, p)| ManifestRow {
                left_path: p.left,
                right_path: p.right,
                label,
                split: if i < train_count {
                    Split::Train
                } else {
                    Split::Test
                },
                source_id: p.source_id,
            })
            .collect::<Vec<_>>()
    };
    // gan drawn first so the rng stream layout is fixed
    let mut rows = take(gan, n_gan, LABEL_GAN);
    rows.extend(take(real, n_real, LABEL_REAL));
    let manifest = SampleManifest { rows, compose_mode };
    manifest.validate()?;
    Ok(manifest)
}

/// Drops every row whose source_id appears in the discard file (one
/// `source_id<TAB>reason` per line), mirroring the extraction CLI output.
pub fn filter_discarded(manifest: &SampleManifest, discard_file: &Path) -> Result<SampleManifest> {
    let text = std::fs::read_to_string(discard_file)?;
    let discarded: HashSet<&str> = text
        .lines()
        .filter_map(|l| l.split(['\t', ' ']).next())
        .filter(|s| !s.is_empty())
        .collect();
    Ok(SampleManifest {
        rows: manifest
            .rows
            .iter()
            .filter(|r| !discarded.contains(r.source_id.as_str()))
            .cloned()
            .collect(),
        compose_mode: manifest.compose_mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_pair_dir(dir: &Path, prefix: &str, n: usize) {
        std::fs::create_dir_all(dir).unwrap();
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb([100, 100, 100]));
        for i in 0..n {
            img.save(dir.join(format!("{prefix}_{i:05}_L.png"))).unwrap();
            img.save(dir.join(format!("{prefix}_{i:05}_R.png"))).unwrap();
        }
    }

    #[test]
    fn ratio_one_to_one_small_case() {
        let tmp = tempfile::tempdir().unwrap();
        let real = tmp.path().join("real");
        let gan = tmp.path().join("gan");
        fake_pair_dir(&real, "real", 10);
        fake_pair_dir(&gan, "gan", 10);
        let m = build_manifest(&real, &gan, Some((1, 1)), 0.8, 7, ComposeMode::SideBySide)
            .unwrap();
        assert_eq!(m.count(Split::Train, LABEL_GAN), 8);
        assert_eq!(m.count(Split::Train, LABEL_REAL), 8);
        assert_eq!(m.count(Split::Test, LABEL_GAN), 2);
        assert_eq!(m.count(Split::Test, LABEL_REAL), 2);
    }

    #[test]
    fn imbalanced_ratio_reproduces_table_counts() {
        let tmp = tempfile::tempdir().unwrap();
        let real = tmp.path().join("real");
        let gan = tmp.path().join("gan");
        fake_pair_dir(&real, "real", 50);
        fake_pair_dir(&gan, "gan", 50);
        // 1:5 on 50/50 -> 10 gan, 50 real; 0.8 split -> 8/40 train, 2/10 test
        let m = build_manifest(&real, &gan, Some((1, 5)), 0.8, 7, ComposeMode::SideBySide)
            .unwrap();
        assert_eq!(m.count(Split::Train, LABEL_GAN), 8);
        assert_eq!(m.count(Split::Train, LABEL_REAL), 40);
        assert_eq!(m.count(Split::Test, LABEL_GAN), 2);
        assert_eq!(m.count(Split::Test, LABEL_REAL), 10);
    }

    #[test]
    fn keep_all_mode_reproduces_uneven_counts() {
        // the balanced protocol keeps every sample even when class counts
        // differ slightly; fractions floor
        let tmp = tempfile::tempdir().unwrap();
        let real = tmp.path().join("real");
        let gan = tmp.path().join("gan");
        fake_pair_dir(&real, "real", 11);
        fake_pair_dir(&gan, "gan", 13);
        let m = build_manifest(&real, &gan, None, 0.8, 7, ComposeMode::SideBySide).unwrap();
        assert_eq!(m.count(Split::Train, LABEL_GAN), 10); // floor(13*0.8)
        assert_eq!(m.count(Split::Test, LABEL_GAN), 3);
        assert_eq!(m.count(Split::Train, LABEL_REAL), 8);
        assert_eq!(m.count(Split::Test, LABEL_REAL), 3);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let tmp = tempfile::tempdir().unwrap();
        let real = tmp.path().join("real");
        let gan = tmp.path().join("gan");
        fake_pair_dir(&real, "real", 20);
        fake_pair_dir(&gan, "gan", 20);
        let a = build_manifest(&real, &gan, Some((1, 2)), 0.75, 3, ComposeMode::SideBySide)
            .unwrap();
        let b = build_manifest(&real, &gan, Some((1, 2)), 0.75, 3, ComposeMode::SideBySide)
            .unwrap();
        let ids = |m: &SampleManifest| {
            m.rows
                .iter()
                .map(|r| (r.source_id.clone(), r.split))
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(&a), ids(&b));
        let train: HashSet<_> = a
            .split_rows(Split::Train)
            .map(|r| r.source_id.clone())
            .collect();
        for row in a.split_rows(Split::Test) {
            assert!(!train.contains(&row.source_id));
        }
    }

    #[test]
    fn insufficient_ratio_reports_achievable() {
        let tmp = tempfile::tempdir().unwrap();
        let real = tmp.path().join("real");
        let gan = tmp.path().join("gan");
        fake_pair_dir(&real, "real", 2);
        fake_pair_dir(&gan, "gan", 2);
        let err = build_manifest(&real, &gan, Some((1, 5)), 0.8, 7, ComposeMode::SideBySide)
            .unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { .. }), "{err}");
    }

    #[test]
    fn save_load_roundtrip_and_discard_filter() {
        let tmp = tempfile::tempdir().unwrap();
        let real = tmp.path().join("real");
        let gan = tmp.path().join("gan");
        fake_pair_dir(&real, "real", 5);
        fake_pair_dir(&gan, "gan", 5);
        let m = build_manifest(&real, &gan, None, 0.8, 1, ComposeMode::ChannelStack).unwrap();
        let path = tmp.path().join("manifest.csv");
        m.save(&path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.compose_mode, ComposeMode::ChannelStack);
        assert_eq!(loaded.rows.len(), m.rows.len());

        let discard = tmp.path().join("discarded.txt");
        let victim = &m.rows[0].source_id;
        std::fs::write(&discard, format!("{victim}\tno iris\n")).unwrap();
        let filtered = filter_discarded(&loaded, &discard).unwrap();
        assert_eq!(filtered.rows.len(), m.rows.len() - 1);
        assert!(filtered.rows.iter().all(|r| &r.source_id != victim));
    }

    #[test]
    fn load_rejects_missing_files_and_bad_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.csv");
        std::fs::write(
            &path,
            "left_path,right_path,label,split,source_id\n/nope_L.png,/nope_R.png,1,train,x\n",
        )
        .unwrap();
        assert!(load_manifest(&path).is_err());
        std::fs::write(&path, "left_path,right_path,label,split,source_id\na,b,2,train,x\n")
            .unwrap();
        assert!(load_manifest(&path).is_err());
    }
}
