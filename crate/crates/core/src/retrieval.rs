//! Bag-of-visual-words retrieval: k-means dictionary, histogram encoding,
//! exhaustive nearest-neighbour ranking and accuracy@K.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::evalbench::PairDetector;
use crate::features::{describe_all, Descriptor};
use crate::image::{read_image, write_image, Image};
use crate::rng::{stream_rng, substream};
use crate::synth::synth_image;
use crate::warp::{random_warp, warp_image, WarpParams};

pub const DEFAULT_WORDS: usize = 64;
pub const DEFAULT_KMEANS_ITERS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct VisualDictionary {
    dim: usize,
    centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl VisualDictionary {
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self> {
        if centroids.len() < 2 {
            return Err(CoreError::invalid(format!("{} visual words, need at least 2", centroids.len())));
        }
        let dim = centroids[0].len();
        if centroids.iter().any(|c| c.len() != dim || c.iter().any(|v| !v.is_finite())) {
            return Err(CoreError::invalid("centroids must be finite and of equal dimension"));
        }
        Ok(Self { dim, centroids })
    }

    pub fn word_count(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Nearest word; ties go to the lower index.
    pub fn assign(&self, v: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(v, c);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

/// Output of [`kmeans_fit`].
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub dictionary: VisualDictionary,
    /// Sum of squared distances to the assigned centroid after every assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached.
pub fn kmeans_fit(points: &[Vec<f64>], word_count: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    if word_count < 2 {
        return Err(CoreError::invalid(format!("word count {word_count}")));
    }
    let dim = points.first().map_or(0, |p| p.len());
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(CoreError::invalid("points must be finite and of equal dimension"));
    }
    let distinct: HashSet<Vec<u64>> = points.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
    if distinct.len() < word_count {
        return Err(CoreError::NotEnoughData {
            needed: word_count,
            have: distinct.len(),
        });
    }

    let mut rng = stream_rng(seed, "kmeans", 0);
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < word_count {
        let total: f64 = d2.iter().sum();
        let mut t = rng.gen::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("a point differs from every centroid");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && t < d {
                pick = i;
                break;
            }
            t -= d;
        }
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let mut dict = VisualDictionary { dim, centroids };
    let mut assignment: Vec<usize> = Vec::new();
    let mut inertia = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        let next: Vec<usize> = points.par_iter().map(|p| dict.assign(p)).collect();
        inertia.push(points.iter().zip(&next).map(|(p, &k)| sq_dist(p, &dict.centroids[k])).sum());
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; word_count];
        let mut counts = vec![0usize; word_count];
        for (p, &k) in points.iter().zip(&assignment) {
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(p) {
                *s += v;
            }
        }
        for k in 0..word_count {
            // an emptied cluster keeps its centroid
            if counts[k] > 0 {
                dict.centroids[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
    }
    Ok(KMeansFit {
        dictionary: dict,
        inertia,
        iterations,
        converged,
    })
}

pub fn descriptor_points(descs: &[Descriptor]) -> Vec<Vec<f64>> {
    descs.iter().map(|d| d.values().iter().map(|&v| v as f64).collect()).collect()
}

/// L2-normalised visual-word histogram (all zeros without descriptors).
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor {
    histogram: Vec<f64>,
}

impl GlobalDescriptor {
    pub fn from_histogram(histogram: Vec<f64>) -> Self {
        Self { histogram }
    }

    pub fn histogram(&self) -> &[f64] {
        &self.histogram
    }

    pub fn norm(&self) -> f64 {
        self.histogram.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn encode(dict: &VisualDictionary, descs: &[Descriptor]) -> GlobalDescriptor {
    let mut hist = vec![0.0; dict.word_count()];
    for p in descriptor_points(descs) {
        hist[dict.assign(&p)] += 1.0;
    }
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        hist.iter_mut().for_each(|v| *v /= norm);
    }
    GlobalDescriptor { histogram: hist }
}

/// Database indices ranked by L2 distance to `q` (ties by index), at most `k`.
pub fn query(db: &[GlobalDescriptor], q: &GlobalDescriptor, k: usize) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = db
        .iter()
        .enumerate()
        .map(|(i, d)| (sq_dist(d.histogram(), q.histogram()), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Fraction of queries with an entry of the right label among the first `k`
/// ranked database entries.
pub fn accuracy_at_k(rankings: &[Vec<usize>], db_labels: &[usize], query_labels: &[usize], k: usize) -> f64 {
    assert_eq!(rankings.len(), query_labels.len(), "one ranking per query");
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(query_labels)
        .filter(|(r, &label)| r.iter().take(k).any(|&i| db_labels[i] == label))
        .count();
    hits as f64 / rankings.len() as f64
}

pub fn accuracy_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("K,accuracy\n");
    for (k, a) in curve {
        out.push_str(&format!("{k},{a:.6}\n"));
    }
    out
}

// ----- files -------------------------------------------------------------------

pub const DICTIONARY_MAGIC: &[u8; 4] = b"NKD1";
pub const GLOBAL_MAGIC: &[u8; 4] = b"NKG1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Decode {
                offset: self.bytes.len(),
                msg: "truncated".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(CoreError::Decode {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(CoreError::Decode {
                offset: self.pos,
                msg: "trailing bytes".into(),
            });
        }
        Ok(())
    }
}

/// Little-endian: magic, `u32` words, `u32` dim, centroids as `f32`.
pub fn encode_dictionary(dict: &VisualDictionary) -> Vec<u8> {
    let mut out = DICTIONARY_MAGIC.to_vec();
    put_u32(&mut out, dict.word_count());
    put_u32(&mut out, dict.dim());
    for c in dict.centroids() {
        for &v in c {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_dictionary(bytes: &[u8]) -> Result<VisualDictionary> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(DICTIONARY_MAGIC)?;
    let (words, dim) = (r.u32()?, r.u32()?);
    let centroids = (0..words)
        .map(|_| (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    VisualDictionary::new(centroids)
}

/// Little-endian: magic, `u32` count, `u32` words, then per record a `u32`
/// label and the histogram as `f32`.
pub fn encode_globals(items: &[(usize, GlobalDescriptor)]) -> Result<Vec<u8>> {
    let words = items.first().map_or(0, |(_, g)| g.histogram().len());
    let mut out = GLOBAL_MAGIC.to_vec();
    put_u32(&mut out, items.len());
    put_u32(&mut out, words);
    for (label, g) in items {
        if g.histogram().len() != words {
            return Err(CoreError::invalid("global descriptors of mixed length"));
        }
        put_u32(&mut out, *label);
        for &v in g.histogram() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_globals(bytes: &[u8]) -> Result<Vec<(usize, GlobalDescriptor)>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(GLOBAL_MAGIC)?;
    let (count, words) = (r.u32()?, r.u32()?);
    let items = (0..count)
        .map(|_| {
            let label = r.u32()?;
            let hist = (0..words).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            Ok((label, GlobalDescriptor::from_histogram(hist)))
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(items)
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| CoreError::file(path, e))
}

pub fn read_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    fs::read(path).map_err(|e| CoreError::file(path, e))
}

// ----- synthetic experiment -----------------------------------------------------

/// Labelled database and query images: every object is one synthetic anchor,
/// entries are independently warped views of it.
#[derive(Clone, Debug)]
pub struct RetrievalSet {
    pub database: Vec<(usize, Image)>,
    pub queries: Vec<(usize, Image)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSetConfig {
    pub objects: usize,
    pub variants: usize,
    pub queries_per_object: usize,
    pub width: usize,
    pub height: usize,
    pub warp: WarpParams,
}

impl Default for RetrievalSetConfig {
    fn default() -> Self {
        Self {
            objects: 10,
            variants: 8,
            queries_per_object: 2,
            width: 192,
            height: 144,
            warp: WarpParams::default(),
        }
    }
}

pub fn build_retrieval_set(seed: u64, cfg: &RetrievalSetConfig) -> Result<RetrievalSet> {
    let views = cfg.variants + cfg.queries_per_object;
    let all: Vec<(usize, usize, Image)> = (0..cfg.objects * views)
        .into_par_iter()
        .map(|i| {
            let (obj, view) = (i / views, i % views);
            let anchor = synth_image(substream(seed, "object", obj as u64), cfg.width, cfg.height);
            let warp = random_warp(substream(seed, "view", i as u64), cfg.width, cfg.height, &cfg.warp)?;
            Ok((obj, view, warp_image(&warp, &anchor).0))
        })
        .collect::<Result<_>>()?;
    let mut set = RetrievalSet {
        database: Vec::new(),
        queries: Vec::new(),
    };
    for (obj, view, img) in all {
        if view < cfg.variants {
            set.database.push((obj, img));
        } else {
            set.queries.push((obj, img));
        }
    }
    Ok(set)
}

/// Writes `db/` and `query/` as `LLL_VV.png`, where `LLL` is the object label.
pub fn save_retrieval_set(out: impl AsRef<Path>, set: &RetrievalSet) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (sub, items) in [("db", &set.database), ("query", &set.queries)] {
        let dir = out.as_ref().join(sub);
        fs::create_dir_all(&dir).map_err(|e| CoreError::file(&dir, e))?;
        let mut view = 0;
        for (i, (label, img)) in items.iter().enumerate() {
            if i > 0 && items[i - 1].0 != *label {
                view = 0;
            }
            let path = dir.join(format!("{label:03}_{view:02}.png"));
            write_image(&path, img)?;
            written.push(path);
            view += 1;
        }
    }
    Ok(written)
}

/// Loads every PNG in `dir` in name order; the label is the file name up to the first `_`.
pub fn load_labelled_images(dir: impl AsRef<Path>) -> Result<Vec<(usize, Image)>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CoreError::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    paths
        .par_iter()
        .map(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let label = stem
                .split('_')
                .next()
                .and_then(|l| l.parse().ok())
                .ok_or_else(|| CoreError::invalid(format!("{}: name must start with a numeric label", p.display())))?;
            Ok((label, read_image(p)?))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RetrievalResult {
    pub dictionary: VisualDictionary,
    pub database: Vec<(usize, GlobalDescriptor)>,
    pub rankings: Vec<Vec<usize>>,
    /// `(K, accuracy@K)` for `K = 1..=max_k`.
    pub curve: Vec<(usize, f64)>,
}

/// Detects and describes every image, fits the dictionary on the database
/// descriptors, encodes everything and ranks the database for each query.
pub fn run_retrieval(
    det: &dyn PairDetector,
    set: &RetrievalSet,
    budget: usize,
    word_count: usize,
    seed: u64,
    max_k: usize,
) -> Result<RetrievalResult> {
    let describe = |img: &Image| -> Result<Vec<Descriptor>> {
        let kps = det.detect(img, budget)?;
        Ok(describe_all(img, &kps).into_iter().filter(|d| !d.is_zero()).collect())
    };
    let db_descs: Vec<Vec<Descriptor>> = set.database.par_iter().map(|(_, img)| describe(img)).collect::<Result<_>>()?;
    let q_descs: Vec<Vec<Descriptor>> = set.queries.par_iter().map(|(_, img)| describe(img)).collect::<Result<_>>()?;
    let points: Vec<Vec<f64>> = db_descs.iter().flat_map(|d| descriptor_points(d)).collect();
    let dictionary = kmeans_fit(&points, word_count, seed, DEFAULT_KMEANS_ITERS)?.dictionary;

    let database: Vec<(usize, GlobalDescriptor)> = set
        .database
        .iter()
        .zip(&db_descs)
        .map(|((label, _), d)| (*label, encode(&dictionary, d)))
        .collect();
    let db_globals: Vec<GlobalDescriptor> = database.iter().map(|(_, g)| g.clone()).collect();
    let rankings: Vec<Vec<usize>> = q_descs
        .iter()
        .map(|d| query(&db_globals, &encode(&dictionary, d), db_globals.len()))
        .collect();
    let db_labels: Vec<usize> = database.iter().map(|(l, _)| *l).collect();
    let q_labels: Vec<usize> = set.queries.iter().map(|(l, _)| *l).collect();
    let curve = (1..=max_k)
        .map(|k| (k, accuracy_at_k(&rankings, &db_labels, &q_labels, k)))
        .collect();
    Ok(RetrievalResult {
        dictionary,
        database,
        rankings,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clouds() -> (Vec<Vec<f64>>, [Vec<f64>; 2]) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = Vec::new();
        let mut means = [vec![0.0; 3], vec![0.0; 3]];
        for c in 0..2 {
            for _ in 0..40 {
                let p: Vec<f64> = (0..3).map(|_| c as f64 * 100.0 + rng.gen_range(-1.0..1.0)).collect();
                for (m, v) in means[c].iter_mut().zip(&p) {
                    *m += v / 40.0;
                }
                pts.push(p);
            }
        }
        (pts, means)
    }

    #[test]
    fn separated_clouds_recover_means() {
        let (pts, means) = clouds();
        let fit = kmeans_fit(&pts, 2, 1, 20).unwrap();
        assert!(fit.converged);
        let mut got = fit.dictionary.centroids().to_vec();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (g, m) in got.iter().zip(&means) {
            for (x, y) in g.iter().zip(m) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| rng.gen::<f64>()).collect()).collect();
        let fit = kmeans_fit(&pts, 7, 2, 100).unwrap();
        assert!(fit.inertia.len() > 2);
        for w in fit.inertia.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", fit.inertia);
        }
    }

    #[test]
    fn identical_points_are_rejected() {
        let pts = vec![vec![1.0, 2.0]; 10];
        assert!(matches!(kmeans_fit(&pts, 2, 0, 10), Err(CoreError::NotEnoughData { needed: 2, have: 1 })));
    }

    #[test]
    fn encoding_and_ranking() {
        let dict = VisualDictionary::new(vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]]).unwrap();
        assert_eq!(encode(&dict, &[]).norm(), 0.0);
        let d = |x: f32, y: f32| Descriptor::from_values(vec![x, y]);
        let g = encode(&dict, &[d(1.0, 0.0), d(0.0, 1.0)]);
        assert_eq!(g.histogram(), &[1.0, 0.0, 0.0]);
        let db = vec![encode(&dict, &[d(9.0, 0.0)]), g.clone(), encode(&dict, &[d(9.0, 0.0)])];
        assert_eq!(query(&db, &g, 1), vec![1]);
        assert_eq!(query(&db, &g, 10), vec![1, 0, 2]);
    }

    #[test]
    fn file_round_trips() {
        let dict = VisualDictionary::new(vec![vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        assert_eq!(decode_dictionary(&encode_dictionary(&dict)).unwrap(), dict);
        let items = vec![(3, GlobalDescriptor::from_histogram(vec![0.625, 0.75])), (1, GlobalDescriptor::from_histogram(vec![1.0, 0.0]))];
        assert_eq!(decode_globals(&encode_globals(&items).unwrap()).unwrap(), items);
        let mut bad = encode_dictionary(&dict);
        bad.push(0);
        assert!(decode_dictionary(&bad).is_err());
    }
}
