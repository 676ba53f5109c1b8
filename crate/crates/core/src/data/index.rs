use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Image paths with dense class labels, ordered by class then file name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub class_names: Vec<String>,
    pub entries: Vec<(PathBuf, usize)>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_names.len()];
        for (_, l) in &self.entries {
            c[*l] += 1;
        }
        c
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|(_, l)| *l).collect()
    }

    fn subset(&self, entries: Vec<(PathBuf, usize)>) -> DatasetIndex {
        DatasetIndex { class_names: self.class_names.clone(), entries }
    }
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let io = |source| DataError::Io { path: dir.to_path_buf(), source };
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(io)? {
        out.push(e.map_err(io)?.path());
    }
    out.sort();
    Ok(out)
}

/// Indexes `root/<class>/*.{png,jpg,jpeg}`.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex, DataError> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(DataError::NotADirectory(root.to_path_buf()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(root.to_path_buf()));
    }
    let mut class_names = Vec::new();
    let mut entries = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect();
        if files.is_empty() {
            return Err(DataError::EmptyClass(name));
        }
        entries.extend(files.into_iter().map(|f| (f, label)));
        class_names.push(name);
    }
    Ok(DatasetIndex { class_names, entries })
}

/// How per-class validation counts are rounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRounding {
    /// `floor(count * fraction)` per class.
    #[default]
    Floor,
    /// Per-class floors topped up by largest fractional remainder until the
    /// total reaches `round(total * fraction)`.
    LargestRemainder,
}

/// Per-class validation counts for the given class totals.
pub fn validation_counts(counts: &[usize], fraction: f64, rounding: SplitRounding) -> Vec<usize> {
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * fraction).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    if rounding == SplitRounding::LargestRemainder {
        let target = (counts.iter().sum::<usize>() as f64 * fraction).round() as usize;
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        for &c in order.iter().cycle().take(counts.len()) {
            if take.iter().sum::<usize>() >= target {
                break;
            }
            if take[c] + 1 < counts[c] {
                take[c] += 1;
            }
        }
    }
    take
}

/// Stratified train/validation partition, shuffled per class from `seed`.
/// Both halves keep index order.
pub fn stratified_split(
    index: &DatasetIndex,
    fraction: f64,
    seed: u64,
    rounding: SplitRounding,
) -> Result<(DatasetIndex, DatasetIndex), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    let counts = index.counts();
    for (c, &n) in counts.iter().enumerate() {
        if n < 2 {
            return Err(DataError::TooFewSamples { class: index.class_names[c].clone(), count: n });
        }
    }
    let take = validation_counts(&counts, fraction, rounding);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_val = vec![false; index.len()];
    for (c, &k) in take.iter().enumerate() {
        let mut members: Vec<usize> = (0..index.len()).filter(|&i| index.entries[i].1 == c).collect();
        members.shuffle(&mut rng);
        for &i in &members[..k] {
            in_val[i] = true;
        }
    }
    let (val, train): (Vec<_>, Vec<_>) = index.entries.iter().cloned().enumerate().partition(|(i, _)| in_val[*i]);
    let strip = |v: Vec<(usize, (PathBuf, usize))>| v.into_iter().map(|(_, e)| e).collect();
    Ok((index.subset(strip(train)), index.subset(strip(val))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_rounding_reproduces_published_validation_supports() {
        let v = validation_counts(&[826, 822, 395, 827], 0.2, SplitRounding::Floor);
        assert_eq!(v, vec![165, 164, 79, 165]);
        assert_eq!(v.iter().sum::<usize>(), 573);
        assert_eq!(2870 - 573, 2297);
        let lr = validation_counts(&[826, 822, 395, 827], 0.2, SplitRounding::LargestRemainder);
        assert_eq!(lr.iter().sum::<usize>(), 574);
    }

    #[test]
    fn even_classes_split_exactly() {
        assert_eq!(validation_counts(&[100; 4], 0.2, SplitRounding::Floor), vec![20; 4]);
        assert_eq!(validation_counts(&[100; 4], 0.2, SplitRounding::LargestRemainder), vec![20; 4]);
    }
}
