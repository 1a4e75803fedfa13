//! Synthetic re-identification benchmark.
//!
//! Each identity is a stick figure with a torso/leg colour pair (coarse
//! attribute) and a small logo with a colour and vertical position (fine
//! attribute). Identities come in pairs that share the coarse attribute, so
//! telling partners apart needs the logo.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.2],
    [0.2, 0.3, 0.85],
    [0.9, 0.8, 0.15],
    [0.6, 0.2, 0.7],
    [0.15, 0.75, 0.8],
    [0.5, 0.3, 0.1],
    [0.1, 0.4, 0.3],
];

const LOGO_COLORS: [[f64; 3]; 4] = [[1.0, 1.0, 1.0], [0.05, 0.05, 0.05], [1.0, 0.5, 0.0], [0.9, 0.3, 0.6]];

/// Logo rows as fractions of the torso height.
const LOGO_SLOTS: [f64; 3] = [0.15, 0.45, 0.75];

const SKIN: [f64; 3] = [0.9, 0.75, 0.6];
const BACKGROUND: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_identities: usize,
    pub test_identities: usize,
    pub train_per_identity: usize,
    pub query_per_identity: usize,
    pub gallery_per_identity: usize,
    pub height: usize,
    pub width: usize,
    /// Maximum translation in pixels along each axis.
    pub jitter: usize,
    /// Maximum relative brightness change.
    pub brightness: f64,
    /// Probability that a sample gets an occluding rectangle.
    pub occlusion: f64,
    /// Occluder side lengths as fractions of the image height and width.
    pub occlusion_size: (f64, f64),
    /// Occlude query images only (train and gallery stay clean).
    pub occlude_query_only: bool,
    /// Mirror samples with probability 1/2.
    pub flip: bool,
    /// Amplitude of background noise; also turns on the per-camera tint.
    pub clutter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_identities: 32,
            test_identities: 32,
            train_per_identity: 8,
            query_per_identity: 2,
            gallery_per_identity: 4,
            height: 48,
            width: 24,
            jitter: 2,
            brightness: 0.15,
            occlusion: 0.0,
            occlusion_size: (0.35, 0.6),
            occlude_query_only: true,
            flip: true,
            clutter: 0.1,
        }
    }
}

impl SyntheticSpec {
    /// Same identities and sampling with every nuisance switched off.
    pub fn clean(&self) -> Self {
        Self {
            jitter: 0,
            brightness: 0.0,
            occlusion: 0.0,
            flip: false,
            clutter: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Infeasible(m));
        let total = self.train_identities + self.test_identities;
        if self.train_identities % 2 != 0 || self.test_identities % 2 != 0 {
            return bad("identity counts must be even (identities come in coarse pairs)".into());
        }
        if self.train_identities < 2 || self.test_identities < 2 {
            return bad("need at least 2 train and 2 test identities".into());
        }
        let coarse = PALETTE.len() * (PALETTE.len() - 1);
        if total / 2 > coarse {
            return bad(format!("{total} identities need {} coarse pairs, only {coarse} exist", total / 2));
        }
        if self.train_per_identity < 2 || self.gallery_per_identity < 2 || self.query_per_identity < 1 {
            return bad("need >= 2 train and gallery samples and >= 1 query sample per identity".into());
        }
        if self.height < 16 || self.width < 8 {
            return bad(format!("image {}x{} is too small to draw a figure", self.height, self.width));
        }
        if 2 * self.jitter >= self.width / 4 {
            return bad(format!("jitter {} would push the figure out of frame", self.jitter));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return bad(format!("occlusion probability {} outside [0, 1]", self.occlusion));
        }
        let (fh, fw) = self.occlusion_size;
        if !(fh > 0.0 && fh <= 1.0 && fw > 0.0 && fw <= 1.0) {
            return bad(format!("occluder {fh}x{fw} exceeds the image"));
        }
        if !(0.0..1.0).contains(&self.brightness) || self.clutter < 0.0 {
            return bad("brightness must be in [0, 1) and clutter >= 0".into());
        }
        Ok(())
    }
}

/// Latent attributes of one identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub torso: usize,
    pub legs: usize,
    pub logo_color: usize,
    pub logo_slot: usize,
}

impl Identity {
    pub fn coarse(&self) -> (usize, usize) {
        (self.torso, self.legs)
    }

    pub fn fine(&self) -> (usize, usize) {
        (self.logo_color, self.logo_slot)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `[N, 3, H, W]`
    pub images: Tensor,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Images at `indices`, stacked as a batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let per = self.images.numel() / self.len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(&shape, data).expect("batch shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub identities: Vec<Identity>,
    /// Train identities are `0..train_identities`; test identities follow.
    pub train: Split,
    pub query: Split,
    pub gallery: Split,
}

/// Latent table: consecutive identities `2k, 2k + 1` share a coarse pair and
/// differ in the logo. Every identity is distinct.
pub fn identity_table(spec: &SyntheticSpec, seed: u64) -> Vec<Identity> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d7a_5eed);
    let mut coarse: Vec<(usize, usize)> = (0..PALETTE.len())
        .flat_map(|t| (0..PALETTE.len()).filter(move |&l| l != t).map(move |l| (t, l)))
        .collect();
    coarse.shuffle(&mut rng);
    let fine: Vec<(usize, usize)> = (0..LOGO_COLORS.len())
        .flat_map(|c| (0..LOGO_SLOTS.len()).map(move |s| (c, s)))
        .collect();
    let total = spec.train_identities + spec.test_identities;
    let mut out = Vec::with_capacity(total);
    for &(torso, legs) in coarse.iter().take(total / 2) {
        let pick: Vec<_> = fine.choose_multiple(&mut rng, 2).cloned().collect();
        for (logo_color, logo_slot) in pick {
            out.push(Identity {
                torso,
                legs,
                logo_color,
                logo_slot,
            });
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Train,
    Query,
    Gallery,
}

fn stream_seed(seed: u64, role: Role, identity: usize, index: usize, salt: u64) -> u64 {
    // SplitMix64 over the tuple; distinct tuples give independent streams.
    let mut z = seed
        ^ (role as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (identity as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ (index as u64).wrapping_mul(0x94d0_49bb_1331_11eb)
        ^ salt.wrapping_mul(0x2545_f491_4f6c_dd1d);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fill(img: &mut [f64], (h, w): (usize, usize), rows: (isize, isize), cols: (isize, isize), color: [f64; 3]) {
    for y in rows.0.max(0)..rows.1.min(h as isize) {
        for x in cols.0.max(0)..cols.1.min(w as isize) {
            for (c, v) in color.iter().enumerate() {
                img[(c * h + y as usize) * w + x as usize] = *v;
            }
        }
    }
}

/// Render one sample `[3, H, W]`.
pub fn render(spec: &SyntheticSpec, id: &Identity, camera: usize, occlude: bool, seed: u64) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut occ_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0cc1_0de5);
    let mut img = vec![BACKGROUND; 3 * h * w];

    if spec.clutter > 0.0 {
        let tint = if camera == 0 { [-0.05, 0.0, 0.08] } else { [0.08, 0.03, -0.05] };
        for c in 0..3 {
            for v in &mut img[c * h * w..(c + 1) * h * w] {
                *v += tint[c] + spec.clutter * rng.gen_range(-1.0..1.0);
            }
        }
    }

    let j = spec.jitter as isize;
    let (dy, dx) = if j > 0 {
        (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
    } else {
        (0, 0)
    };
    let (hi, wi) = (h as isize, w as isize);
    let left = wi / 6 + dx;
    let right = wi - wi / 6 + dx;
    let head = (hi / 24 + dy, hi / 6 + dy);
    let torso = (head.1, hi / 2 + hi / 12 + dy);
    let legs = (torso.1, hi - hi / 24 + dy);
    let mid = wi / 2 + dx;
    fill(&mut img, (h, w), head, (mid - wi / 8, mid + wi / 8), SKIN);
    fill(&mut img, (h, w), torso, (left, right), PALETTE[id.torso]);
    fill(&mut img, (h, w), legs, (left + wi / 12, mid - 1), PALETTE[id.legs]);
    fill(&mut img, (h, w), legs, (mid + 1, right - wi / 12), PALETTE[id.legs]);

    // Logo: centred horizontally so mirroring keeps it in place.
    let size = (hi / 8).max(2);
    let top = torso.0 + ((torso.1 - torso.0 - size) as f64 * LOGO_SLOTS[id.logo_slot]).round() as isize;
    fill(
        &mut img,
        (h, w),
        (top, top + size),
        (mid - size / 2, mid - size / 2 + size),
        LOGO_COLORS[id.logo_color],
    );

    if spec.brightness > 0.0 {
        let b = 1.0 + rng.gen_range(-spec.brightness..=spec.brightness);
        img.iter_mut().for_each(|v| *v *= b);
    }
    if spec.flip && rng.gen_bool(0.5) {
        for row in img.chunks_mut(w) {
            row.reverse();
        }
    }

    // The occluder is always drawn from its own stream so clean and occluded
    // renders of a sample differ only inside the rectangle.
    let oh = ((spec.occlusion_size.0 * h as f64).round() as usize).clamp(1, h);
    let ow = ((spec.occlusion_size.1 * w as f64).round() as usize).clamp(1, w);
    let hit = occ_rng.gen_bool(spec.occlusion.clamp(0.0, 1.0));
    let oy = occ_rng.gen_range(0..=h - oh) as isize;
    let ox = occ_rng.gen_range(0..=w - ow) as isize;
    let shade = occ_rng.gen_range(0.2..0.8);
    if occlude && hit {
        fill(
            &mut img,
            (h, w),
            (oy, oy + oh as isize),
            (ox, ox + ow as isize),
            [shade; 3],
        );
    }

    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn make_split(
    spec: &SyntheticSpec,
    seed: u64,
    identities: &[Identity],
    ids: std::ops::Range<usize>,
    per: usize,
    role: Role,
) -> Result<Split> {
    let occlude = match role {
        Role::Query => true,
        _ => !spec.occlude_query_only,
    };
    let mut data = Vec::with_capacity(ids.len() * per * 3 * spec.height * spec.width);
    let (mut out_ids, mut cams) = (Vec::new(), Vec::new());
    for id in ids {
        for k in 0..per {
            // Queries start on camera 0 and gallery on camera 1 so every
            // query keeps cross-camera matches after filtering.
            let cam = match role {
                Role::Gallery => (k + 1) % 2,
                _ => k % 2,
            };
            let s = stream_seed(seed, role, id, k, 0);
            data.extend(render(spec, &identities[id], cam, occlude, s));
            out_ids.push(id);
            cams.push(cam);
        }
    }
    let images = Tensor::new(&[out_ids.len(), 3, spec.height, spec.width], data)?;
    Ok(Split {
        images,
        ids: out_ids,
        cams,
    })
}

/// Deterministic dataset for `seed`. Train and test identities are disjoint.
pub fn synth_generate(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let identities = identity_table(spec, seed);
    let t = spec.train_identities;
    let all = t + spec.test_identities;
    Ok(Dataset {
        train: make_split(spec, seed, &identities, 0..t, spec.train_per_identity, Role::Train)?,
        query: make_split(spec, seed, &identities, t..all, spec.query_per_identity, Role::Query)?,
        gallery: make_split(spec, seed, &identities, t..all, spec.gallery_per_identity, Role::Gallery)?,
        identities,
    })
}

/// Write a split as one tensor file per sample plus `index.txt` with lines
/// `<file> <identity> <camera>`.
pub fn save_split(split: &Split, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = BufWriter::new(fs::File::create(dir.join("index.txt"))?);
    let per = split.images.numel() / split.len();
    let shape = &split.images.shape()[1..];
    for i in 0..split.len() {
        let name = format!("{i:06}.tensor");
        let t = Tensor::new(shape, split.images.data()[i * per..(i + 1) * per].to_vec())?;
        t.save(&dir.join(&name))?;
        writeln!(index, "{name} {} {}", split.ids[i], split.cams[i])?;
    }
    index.flush()?;
    Ok(())
}

/// Parse an index file into `(file, identity, camera)` rows.
pub fn read_index(path: &Path) -> Result<Vec<(String, usize, usize)>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("{}:{}: bad number {s:?}", path.display(), n + 1)))
        };
        if parts.len() != 3 {
            return Err(Error::Format(format!(
                "{}:{}: expected `<file> <identity> <camera>`",
                path.display(),
                n + 1
            )));
        }
        rows.push((parts[0].to_string(), parse(parts[1])?, parse(parts[2])?));
    }
    Ok(rows)
}

pub fn load_split(dir: &Path) -> Result<Split> {
    let rows = read_index(&dir.join("index.txt"))?;
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: empty index", dir.display())));
    }
    let mut tensors = Vec::with_capacity(rows.len());
    for (file, _, _) in &rows {
        tensors.push(Tensor::load(&dir.join(file))?);
    }
    let refs: Vec<&Tensor> = tensors.iter().collect();
    Ok(Split {
        images: Tensor::stack(&refs)?,
        ids: rows.iter().map(|r| r.1).collect(),
        cams: rows.iter().map(|r| r.2).collect(),
    })
}

pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    save_split(&data.train, &dir.join("train"))?;
    save_split(&data.query, &dir.join("query"))?;
    save_split(&data.gallery, &dir.join("gallery"))?;
    let table = serde_json::to_string_pretty(&data.identities).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("identities.json"), table)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let table = fs::read_to_string(dir.join("identities.json"))?;
    Ok(Dataset {
        identities: serde_json::from_str(&table).map_err(|e| Error::Format(e.to_string()))?,
        train: load_split(&dir.join("train"))?,
        query: load_split(&dir.join("query"))?,
        gallery: load_split(&dir.join("gallery"))?,
    })
}
