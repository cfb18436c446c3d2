//! Dataset trees, in-memory datasets, stratified splitting and batching.

pub mod augment;
pub mod image;
pub mod synth;

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, rng_from, str_word};
use crate::tensor::{Element, Tensor};
use augment::AugmentConfig;
use image::Image;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {reason}")]
    DecodeFailure { path: PathBuf, reason: String },
    #[error("{path}: unsupported image format")]
    UnsupportedFormat { path: PathBuf },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("class directories '{0}' and '{1}' differ only in case or surrounding whitespace")]
    DuplicateClassName(String, String),
    #[error("class '{class}' has {count} sample(s); at least 2 are needed for a validation split")]
    ClassTooSmall { class: String, count: usize },
    #[error("{0}")]
    InvalidConfig(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// `(height, width)` shared by every sample.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.image.height, s.image.width))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// Stratified split: each class holds out `round(n * fraction)` samples,
/// clamped so both sides keep at least one. Both subsets keep the input order.
pub fn split_train_val(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidConfig(format!(
            "validation fraction {fraction} outside (0, 1)"
        )));
    }
    if data.is_empty() {
        return Err(DataError::EmptyDataset("nothing to split".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes()];
    for (i, s) in data.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut val = Vec::new();
    for (k, members) in by_class.iter_mut().enumerate() {
        let n = members.len();
        if n == 0 {
            continue;
        }
        if n < 2 {
            return Err(DataError::ClassTooSmall {
                class: data.class_names[k].clone(),
                count: n,
            });
        }
        let held = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        members.shuffle(&mut rng_from(&[seed, str_word("split"), k as u64]));
        val.extend_from_slice(&members[..held]);
    }
    val.sort_unstable();
    let mut is_val = vec![false; data.len()];
    for &i in &val {
        is_val[i] = true;
    }
    let train: Vec<usize> = (0..data.len()).filter(|&i| !is_val[i]).collect();
    Ok((data.subset(&train), data.subset(&val)))
}

/// Sample order for one epoch, cut into batches; the last may be short.
pub fn batch_plan(n: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut rng_from(&[seed, str_word("shuffle"), epoch]));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn augment_seed(seed: u64, epoch: u64, index: usize) -> u64 {
    derive_seed(&[seed, str_word("augment"), epoch, index as u64])
}

/// Number of samples decoded and augmented ahead of the consumer.
pub const PREFETCH_CHUNK: usize = 128;

#[derive(Debug, Clone)]
pub struct Batch<T: Element> {
    /// `[N, 3, H, W]`
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Yields batches in plan order. Samples are prepared in chunks on the rayon
/// pool; each sample's augmentation depends only on `(seed, epoch, index)`,
/// so chunking and worker count have no numerical effect.
pub struct BatchIter<'a, T: Element> {
    data: &'a Dataset,
    plan: Vec<Vec<usize>>,
    next: usize,
    order: Vec<usize>,
    prepared_end: usize,
    buffer: VecDeque<Image>,
    augment: Option<(&'a AugmentConfig, u64, u64)>,
    chunk: usize,
    _dtype: std::marker::PhantomData<T>,
}

impl<'a, T: Element> BatchIter<'a, T> {
    /// `augment` carries the config, dataset seed and epoch.
    pub fn new(
        data: &'a Dataset,
        plan: Vec<Vec<usize>>,
        augment: Option<(&'a AugmentConfig, u64, u64)>,
        prefetch_chunk: usize,
    ) -> Self {
        let order = plan.iter().flatten().copied().collect();
        Self {
            data,
            plan,
            next: 0,
            order,
            prepared_end: 0,
            buffer: VecDeque::new(),
            augment,
            chunk: prefetch_chunk.max(1),
            _dtype: std::marker::PhantomData,
        }
    }

    fn prepare_through(&mut self, end: usize) {
        while self.prepared_end < end {
            let stop = (self.prepared_end + self.chunk).max(end).min(self.order.len());
            let ids = &self.order[self.prepared_end..stop];
            let data = self.data;
            let aug = self.augment;
            let images: Vec<Image> = ids
                .par_iter()
                .map(|&i| {
                    let img = &data.samples[i].image;
                    match aug {
                        Some((cfg, seed, epoch)) => augment::augment(img, cfg, augment_seed(seed, epoch, i)),
                        None => img.clone(),
                    }
                })
                .collect();
            self.buffer.extend(images);
            self.prepared_end = stop;
        }
    }
}

impl<T: Element> Iterator for BatchIter<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        let indices = self.plan.get(self.next)?.clone();
        self.next += 1;
        let consumed = self.prepared_end - self.buffer.len();
        self.prepare_through(consumed + indices.len());
        let (h, w) = self.data.image_size().expect("non-empty dataset");
        let mut x = Vec::with_capacity(indices.len() * 3 * h * w);
        for _ in &indices {
            let img = self.buffer.pop_front().expect("prepared sample");
            x.extend(img.data.iter().map(|&v| T::of(v as f64)));
        }
        let labels = indices.iter().map(|&i| self.data.samples[i].label).collect();
        Some(Batch {
            x: Tensor::new(x, &[indices.len(), 3, h, w]).expect("batch shape"),
            labels,
            indices,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    pub fn dir_name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub tag: SplitTag,
    pub entries: Vec<ManifestEntry>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub splits: Vec<SplitManifest>,
    /// Files that were found but cannot be read, with the reason.
    pub rejected: Vec<(PathBuf, String)>,
}

impl DatasetManifest {
    pub fn split(&self, tag: SplitTag) -> Option<&SplitManifest> {
        self.splits.iter().find(|s| s.tag == tag)
    }
}

fn sorted_children(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        let entry = entry.map_err(|e| DataError::io(dir, e))?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn check_header(path: &Path) -> std::result::Result<(), String> {
    let mut head = [0u8; 16];
    let mut f = fs::File::open(path).map_err(|e| e.to_string())?;
    let n = f.read(&mut head).map_err(|e| e.to_string())?;
    match image::sniff(&head[..n]) {
        Some(image::Format::Jpeg) if !cfg!(feature = "jpeg") => {
            Err("JPEG support is not enabled in this build".into())
        }
        Some(_) => Ok(()),
        None => Err("unrecognized image format".into()),
    }
}

/// Scans `root/{train,test}/<class>/<image>`. Class indices follow the
/// sorted union of class directory names across both splits.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    let mut raw: Vec<(SplitTag, BTreeMap<String, Vec<PathBuf>>)> = Vec::new();
    let mut rejected = Vec::new();
    for tag in [SplitTag::Train, SplitTag::Test] {
        let dir = root.join(tag.dir_name());
        if !dir.is_dir() {
            continue;
        }
        let mut classes = BTreeMap::new();
        for class_dir in sorted_children(&dir)? {
            if !class_dir.is_dir() {
                rejected.push((class_dir, "not inside a class directory".to_string()));
                continue;
            }
            let name = class_dir.file_name().unwrap().to_string_lossy().into_owned();
            let mut files = Vec::new();
            for file in sorted_children(&class_dir)? {
                if !file.is_file() {
                    rejected.push((file, "not a regular file".to_string()));
                    continue;
                }
                match check_header(&file) {
                    Ok(()) => files.push(file),
                    Err(reason) => rejected.push((file, reason)),
                }
            }
            classes.insert(name, files);
        }
        raw.push((tag, classes));
    }
    if raw.is_empty() {
        return Err(DataError::EmptyDataset(format!(
            "{} has neither a train/ nor a test/ directory",
            root.display()
        )));
    }

    let names: Vec<String> = raw
        .iter()
        .flat_map(|(_, c)| c.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut folded: BTreeMap<String, &String> = BTreeMap::new();
    for n in &names {
        if let Some(prev) = folded.insert(n.trim().to_lowercase(), n) {
            return Err(DataError::DuplicateClassName(prev.clone(), n.clone()));
        }
    }
    if names.len() < 2 {
        return Err(DataError::EmptyDataset(format!(
            "{} class directories found, at least 2 are needed",
            names.len()
        )));
    }
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let splits: Vec<SplitManifest> = raw
        .into_iter()
        .map(|(tag, classes)| {
            let mut counts = vec![0; names.len()];
            let mut entries = Vec::new();
            for (name, files) in classes {
                let label = index[name.as_str()];
                counts[label] = files.len();
                entries.extend(files.into_iter().map(|path| ManifestEntry { path, label }));
            }
            SplitManifest { tag, entries, counts }
        })
        .collect();
    if splits.iter().all(|s| s.entries.is_empty()) {
        return Err(DataError::EmptyDataset(format!(
            "no readable images under {}",
            root.display()
        )));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        class_names: names,
        splits,
        rejected,
    })
}

/// Decodes and resizes every image of one split.
pub fn load_split(manifest: &DatasetManifest, tag: SplitTag, height: usize, width: usize) -> Result<Dataset> {
    let split = manifest.split(tag).filter(|s| !s.entries.is_empty()).ok_or_else(|| {
        DataError::EmptyDataset(format!(
            "no {} images under {}",
            tag.dir_name(),
            manifest.root.display()
        ))
    })?;
    let samples = split
        .entries
        .par_iter()
        .map(|e| {
            Ok(LabeledImage {
                image: image::load_image(&e.path, height, width)?,
                label: e.label,
                id: e
                    .path
                    .strip_prefix(&manifest.root)
                    .unwrap_or(&e.path)
                    .to_string_lossy()
                    .into_owned(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        class_names: manifest.class_names.clone(),
        samples,
    })
}

/// Writes `root/<split>/<class>/<n>.pdimg`, quantizing to 8 bits.
pub fn write_pdimg_tree(data: &Dataset, root: &Path, tag: SplitTag) -> Result<()> {
    let mut next = vec![0usize; data.classes()];
    for name in &data.class_names {
        let dir = root.join(tag.dir_name()).join(name);
        fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
    }
    for s in &data.samples {
        let path = root
            .join(tag.dir_name())
            .join(&data.class_names[s.label])
            .join(format!("{:05}.pdimg", next[s.label]));
        next[s.label] += 1;
        fs::write(&path, image::encode_pdimg(&s.image.to_raw())).map_err(|e| DataError::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use synth::{synth_dataset, SynthSpec};

    #[test]
    fn stratified_split_is_exact_and_disjoint() {
        let d = synth_dataset(&SynthSpec::new(4, 100, 4, 2)).unwrap();
        let (tr, va) = split_train_val(&d, 0.2, 5).unwrap();
        assert_eq!(tr.class_counts(), vec![80; 4]);
        assert_eq!(va.class_counts(), vec![20; 4]);
        let mut ids: Vec<&str> = tr.samples.iter().chain(&va.samples).map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 400);
        let (tr2, _) = split_train_val(&d, 0.2, 5).unwrap();
        assert_eq!(tr, tr2);
    }

    #[test]
    fn split_rejects_singleton_class() {
        let mut d = synth_dataset(&SynthSpec::new(2, 4, 4, 2)).unwrap();
        d.samples.truncate(5);
        assert!(matches!(
            split_train_val(&d, 0.2, 0),
            Err(DataError::ClassTooSmall { count: 1, .. })
        ));
    }

    #[test]
    fn plan_sizes_and_coverage() {
        let plan = batch_plan(100, 32, true, 7, 3);
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 32, 4]);
        let mut all: Vec<usize> = plan.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(plan, batch_plan(100, 32, true, 7, 3));
        assert_ne!(plan, batch_plan(100, 32, true, 7, 4));
    }

    #[test]
    fn prefetch_chunk_has_no_effect() {
        let d = synth_dataset(&SynthSpec::new(3, 10, 6, 4)).unwrap();
        let cfg = AugmentConfig::default();
        let plan = batch_plan(d.len(), 4, true, 1, 0);
        let collect = |chunk| {
            BatchIter::<f64>::new(&d, plan.clone(), Some((&cfg, 1, 0)), chunk)
                .map(|b| b.x.into_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(collect(1), collect(128));
        assert_eq!(collect(3), collect(128));
    }
}
