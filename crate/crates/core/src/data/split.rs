use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_K_TEST: usize = 4;
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

/// Per-class train / validation / test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub class_count: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Partition::Train),
            "val" => Some(Partition::Val),
            "test" => Some(Partition::Test),
            _ => None,
        }
    }
}

fn group_by_class(images: &[LabeledImage]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, img) in images.iter().enumerate() {
        by_class.entry(img.class_id).or_default().push(i);
    }
    by_class
}

/// For every class: `k_test` images chosen uniformly at random go to test;
/// of the remaining `r`, `max(1, ceil(val_fraction·r))` go to validation and
/// the rest to training. Classes need at least `k_test + 2` images so that
/// both validation and training are non-empty.
pub fn make_split(
    images: &[LabeledImage],
    k_test: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if images.is_empty() {
        return Err(Error::EmptySplit("no images to split"));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let by_class = group_by_class(images);
    let class_count = by_class.keys().next_back().map_or(0, |&c| c + 1);
    if by_class.len() != class_count {
        return Err(Error::Config("class ids must be dense 0..C-1".into()));
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        class_count,
        seed,
    };
    for (&class, members) in &by_class {
        let need = k_test + 1;
        if members.len() <= need {
            let name = Path::new(&images[members[0]].source_path)
                .parent()
                .and_then(|p| p.file_name())
                .map_or_else(|| class.to_string(), |n| n.to_string_lossy().into_owned());
            return Err(Error::InsufficientClassSamples {
                class: name,
                have: members.len(),
                need,
            });
        }
        let mut order = members.clone();
        order.shuffle(&mut rng::stream(seed, "split", class as u64));
        let rest = order.len() - k_test;
        let n_val = ((val_fraction * rest as f64).ceil() as usize).clamp(1, rest - 1);
        for (pos, &i) in order.iter().enumerate() {
            let img = images[i].clone();
            if pos < k_test {
                split.test.push(img);
            } else if pos < k_test + n_val {
                split.val.push(img);
            } else {
                split.train.push(img);
            }
        }
    }
    Ok(split)
}

impl DatasetSplit {
    pub fn partitions(&self) -> [(Partition, &[LabeledImage]); 3] {
        [
            (Partition::Train, &self.train),
            (Partition::Val, &self.val),
            (Partition::Test, &self.test),
        ]
    }

    /// CSV manifest `source_path,class_id,partition` with a header row.
    pub fn to_manifest_csv(&self) -> String {
        let mut out = String::from("source_path,class_id,partition\n");
        for (part, imgs) in self.partitions() {
            for img in imgs {
                out.push_str(&format!(
                    "{},{},{}\n",
                    csv_field(&img.source_path),
                    img.class_id,
                    part.name()
                ));
            }
        }
        out
    }

    /// Rebuilds a split from a manifest, taking pixels from `images` by source path.
    pub fn from_manifest_csv(text: &str, images: &[LabeledImage], seed: u64) -> Result<Self> {
        let by_path: BTreeMap<&str, &LabeledImage> =
            images.iter().map(|i| (i.source_path.as_str(), i)).collect();
        let mut split = DatasetSplit {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            class_count: 0,
            seed,
        };
        let mut rows = parse_csv(text)?.into_iter();
        match rows.next() {
            Some(h) if h == ["source_path", "class_id", "partition"] => {}
            _ => {
                return Err(Error::Config(
                    "manifest must start with source_path,class_id,partition".into(),
                ))
            }
        }
        for (n, row) in rows.enumerate() {
            let bad = |what: &str| Error::Config(format!("manifest row {}: {what}", n + 2));
            let [path, class, part] =
                <[String; 3]>::try_from(row).map_err(|_| bad("expected 3 fields"))?;
            let class: usize = class.parse().map_err(|_| bad("bad class_id"))?;
            let part = Partition::parse(&part).ok_or_else(|| bad("bad partition"))?;
            let img = by_path
                .get(path.as_str())
                .ok_or_else(|| bad(&format!("`{path}` is not in the corpus")))?;
            if img.class_id != class {
                return Err(bad(&format!(
                    "`{path}` has class {} in the corpus",
                    img.class_id
                )));
            }
            split.class_count = split.class_count.max(class + 1);
            let img = (*img).clone();
            match part {
                Partition::Train => split.train.push(img),
                Partition::Val => split.val.push(img),
                Partition::Test => split.test.push(img),
            }
        }
        Ok(split)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Minimal RFC-4180 reader: quoted fields, doubled quotes, CRLF or LF rows.
pub(crate) fn parse_csv(text: &str) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    let mut row = Vec::new();
    let mut field = String::new();
    let mut chars = text.chars().peekable();
    let mut quoted = false;
    let mut any = false;
    while let Some(c) = chars.next() {
        any = true;
        if quoted {
            match c {
                '"' if chars.peek() == Some(&'"') => {
                    chars.next();
                    field.push('"');
                }
                '"' => quoted = false,
                _ => field.push(c),
            }
            continue;
        }
        match c {
            '"' if field.is_empty() => quoted = true,
            ',' => row.push(std::mem::take(&mut field)),
            '\r' if chars.peek() == Some(&'\n') => {}
            '\n' => {
                row.push(std::mem::take(&mut field));
                rows.push(std::mem::take(&mut row));
                any = false;
            }
            _ => field.push(c),
        }
    }
    if quoted {
        return Err(Error::Config("unterminated quoted CSV field".into()));
    }
    if any {
        row.push(field);
        rows.push(row);
    }
    Ok(rows)
}
