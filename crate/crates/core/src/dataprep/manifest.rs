use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{read_image, to_gray};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::trainer::Pair;

const HEADER: &str = "#gpic-manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::invalid(format!("split must be train or val, got {s}"))),
        }
    }
}

/// Colour/line path pairs of one resolution and split.
///
/// On disk: a header line `#gpic-manifest<TAB>resolution=S<TAB>split=train`,
/// then one `color<TAB>line` pair per line. Relative paths are resolved
/// against the manifest's directory by [`DatasetManifest::load`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub resolution: usize,
    pub split: Split,
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

impl fmt::Display for DatasetManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{HEADER}\tresolution={}\tsplit={}", self.resolution, self.split)?;
        for (c, l) in &self.pairs {
            writeln!(f, "{}\t{}", c.display(), l.display())?;
        }
        Ok(())
    }
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("manifest", m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut fields = header.split('\t');
        if fields.next() != Some(HEADER) {
            return Err(bad(format!("first line must start with {HEADER}")));
        }
        let (mut resolution, mut split) = (None, None);
        for field in fields {
            match field.split_once('=') {
                Some(("resolution", v)) => resolution = Some(v.parse().map_err(|_| bad(format!("bad resolution {v}")))?),
                Some(("split", v)) => split = Some(v.parse()?),
                _ => return Err(bad(format!("unknown header field {field}"))),
            }
        }
        let mut pairs = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (c, l) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("line {} is not a tab-separated pair", i + 2)))?;
            pairs.push((PathBuf::from(c), PathBuf::from(l)));
        }
        Ok(Self {
            resolution: resolution.ok_or_else(|| bad("header lacks resolution".into()))?,
            split: split.unwrap_or(Split::Train),
            pairs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_string().as_bytes())
    }

    /// Reads a manifest and resolves its paths; every file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(fsutil::read(path)?).map_err(|_| Error::format("manifest", "not UTF-8"))?;
        let mut manifest = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for (c, l) in &mut manifest.pairs {
            *c = base.join(&*c);
            *l = base.join(&*l);
            for p in [&*c, &*l] {
                if !p.is_file() {
                    return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing")));
                }
            }
        }
        Ok(manifest)
    }
}

/// Loads every pair as `[1,3,S,S]` colour and `[1,1,S,S]` line tensors.
pub fn load_pairs(manifest: &DatasetManifest) -> Result<Vec<Pair<f32>>> {
    let s = manifest.resolution;
    manifest
        .pairs
        .iter()
        .map(|(c, l)| {
            let color = read_image(c)?.to_rgb();
            let line = to_gray(&read_image(l)?);
            for (img, p) in [(&color, c), (&line, l)] {
                if img.width() != s || img.height() != s {
                    return Err(Error::format(
                        "manifest",
                        format!("{} is {}x{}, manifest resolution is {s}", p.display(), img.width(), img.height()),
                    ));
                }
            }
            Ok(Pair { color: color.to_tensor(), line: line.to_tensor() })
        })
        .collect()
}
