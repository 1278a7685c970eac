//! Descriptor matching, CMC / mAP retrieval metrics and attention export.
//!
//! Matching scores are squared Euclidean distances: lower is a better match.
//! Each query's gallery is ranked by ascending score; ties keep gallery order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::pnm;
use crate::data::{stack_images, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_RANKS: [usize; 3] = [1, 5, 10];

/// Squared Euclidean distance.
pub fn matching_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("matching_score", "descriptor length", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `[Q, G]` row-major scores between the rows of `queries [Q, D]` and `gallery [G, D]`.
pub fn score_matrix(queries: &Tensor, gallery: &Tensor) -> Result<Vec<f64>> {
    let (qs, gs) = (queries.shape(), gallery.shape());
    if qs.len() != 2 || gs.len() != 2 {
        return Err(Error::Shape {
            op: "score_matrix",
            detail: format!("expected two matrices, got {qs:?} and {gs:?}"),
        });
    }
    let d = qs[1];
    let mut out = Vec::with_capacity(qs[0] * gs[0]);
    for q in queries.data().chunks(d.max(1)).take(qs[0]) {
        for g in gallery.data().chunks(gs[1].max(1)).take(gs[0]) {
            out.push(matching_score(q, g)?);
        }
    }
    Ok(out)
}

/// Scales each consecutive block of `lens` columns of every row to unit
/// length (blocks of zero norm are left alone).
pub fn normalize_blocks(t: &mut Tensor, lens: &[usize]) -> Result<()> {
    let d = t.shape()[1];
    if lens.iter().sum::<usize>() != d {
        return Err(Error::dim("normalize_blocks", "descriptor length", lens.iter().sum(), d));
    }
    for row in t.data_mut().chunks_mut(d) {
        let mut start = 0;
        for &n in lens {
            let block = &mut row[start..start + n];
            let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                block.iter_mut().for_each(|v| *v /= norm);
            }
            start += n;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ranks: Vec<usize>,
    /// Drop gallery items sharing both identity and camera with the query.
    pub exclude_same_camera: bool,
    /// L2-normalize the appearance and attribute blocks separately.
    pub normalize: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ranks: DEFAULT_RANKS.to_vec(),
            exclude_same_camera: false,
            normalize: false,
        }
    }
}

/// Identity and camera tags of one side of the protocol.
#[derive(Debug, Clone, Copy)]
pub struct Tags<'a> {
    pub identities: &'a [usize],
    pub cameras: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub identity: usize,
    /// 1-based rank of the first correct gallery item.
    pub first_hit: usize,
    pub average_precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ranks: Vec<usize>,
    /// CMC value at each of `ranks`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub queries: Vec<QueryResult>,
    pub gallery_size: usize,
}

impl EvalReport {
    pub fn cmc_at(&self, rank: usize) -> Option<f64> {
        self.ranks.iter().position(|&r| r == rank).map(|i| self.cmc[i])
    }

    /// `metric<TAB>value` lines.
    pub fn render(&self) -> String {
        let mut out = String::from("# metric\tvalue\n");
        for (r, v) in self.ranks.iter().zip(&self.cmc) {
            let _ = writeln!(out, "rank{r}\t{v}");
        }
        let _ = writeln!(out, "mAP\t{}", self.map);
        let _ = writeln!(out, "queries\t{}", self.queries.len());
        let _ = writeln!(out, "gallery\t{}", self.gallery_size);
        out
    }

    /// One line per query: position, identity, first-hit rank, AP.
    pub fn render_queries(&self) -> String {
        let mut out = String::from("# query\tidentity\tfirst_hit\tap\n");
        for (i, q) in self.queries.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{}\t{}\t{}", q.identity, q.first_hit, q.average_precision);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("{} queries, {} gallery images\n", self.queries.len(), self.gallery_size);
        for (r, v) in self.ranks.iter().zip(&self.cmc) {
            let _ = write!(out, "Rank-{r} {:6.2}%  ", 100.0 * v);
        }
        let _ = writeln!(out, "mAP {:6.2}%", 100.0 * self.map);
        out
    }
}

/// CMC and mAP from a `[Q, G]` score matrix.
pub fn evaluate_scores(scores: &[f64], query: Tags<'_>, gallery: Tags<'_>, opts: &EvalOptions) -> Result<EvalReport> {
    let (nq, ng) = (query.identities.len(), gallery.identities.len());
    if scores.len() != nq * ng || query.cameras.len() != nq || gallery.cameras.len() != ng {
        return Err(Error::Shape {
            op: "evaluate",
            detail: format!(
                "{} scores for {nq} queries x {ng} gallery items ({} / {} camera tags)",
                scores.len(),
                query.cameras.len(),
                gallery.cameras.len()
            ),
        });
    }
    if opts.ranks.is_empty() || opts.ranks.contains(&0) {
        return Err(Error::Usage("ranks must be a non-empty list of positive integers".into()));
    }
    let mut results = Vec::with_capacity(nq);
    let mut unmatched = Vec::new();
    for q in 0..nq {
        let (qid, qcam) = (query.identities[q], query.cameras[q]);
        let row = &scores[q * ng..(q + 1) * ng];
        let mut order: Vec<usize> = (0..ng)
            .filter(|&g| !(opts.exclude_same_camera && gallery.identities[g] == qid && gallery.cameras[g] == qcam))
            .collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let mut hits = 0;
        let mut precision_sum = 0.0;
        let mut first_hit = 0;
        for (pos, &g) in order.iter().enumerate() {
            if gallery.identities[g] == qid {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                if first_hit == 0 {
                    first_hit = pos + 1;
                }
            }
        }
        if hits == 0 {
            unmatched.push(qid);
            continue;
        }
        results.push(QueryResult {
            identity: qid,
            first_hit,
            average_precision: precision_sum / hits as f64,
        });
    }
    if !unmatched.is_empty() {
        unmatched.sort_unstable();
        unmatched.dedup();
        return Err(Error::Protocol(unmatched));
    }
    if results.is_empty() {
        return Err(Error::Usage("no queries to evaluate".into()));
    }
    let n = results.len() as f64;
    let cmc = opts
        .ranks
        .iter()
        .map(|&k| results.iter().filter(|r| r.first_hit <= k).count() as f64 / n)
        .collect();
    let map = results.iter().map(|r| r.average_precision).sum::<f64>() / n;
    Ok(EvalReport {
        ranks: opts.ranks.clone(),
        cmc,
        map,
        queries: results,
        gallery_size: ng,
    })
}

fn descriptors(model: &mut Model, samples: &[&Sample], opts: &EvalOptions) -> Result<Tensor> {
    let mut d = model.extract_descriptors(&stack_images(samples.iter().map(|s| &s.image))?)?;
    if opts.normalize {
        let lens: Vec<usize> = [model.cfg.appearance_len(), model.cfg.attribute_len(model.schema.len())]
            .into_iter()
            .filter(|&n| n > 0)
            .collect();
        normalize_blocks(&mut d, &lens)?;
    }
    Ok(d)
}

/// Ranks the gallery split for every query of `dataset`.
pub fn evaluate(model: &mut Model, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    check_images(model, dataset)?;
    let queries = dataset.split(Split::Query);
    let gallery = dataset.split(Split::Gallery);
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Validation("dataset needs query and gallery samples".into()));
    }
    let qd = descriptors(model, &queries, opts)?;
    let gd = descriptors(model, &gallery, opts)?;
    let scores = score_matrix(&qd, &gd)?;
    let tags = |s: &[&Sample]| -> (Vec<usize>, Vec<usize>) {
        (s.iter().map(|x| x.identity).collect(), s.iter().map(|x| x.camera).collect())
    };
    let (qi, qc) = tags(&queries);
    let (gi, gc) = tags(&gallery);
    evaluate_scores(
        &scores,
        Tags {
            identities: &qi,
            cameras: &qc,
        },
        Tags {
            identities: &gi,
            cameras: &gc,
        },
        opts,
    )
}

/// Fails with the offending sizes when the dataset's images do not fit the model.
pub fn check_images(model: &Model, dataset: &Dataset) -> Result<()> {
    if let Some(s) = dataset.image_shape() {
        if s != [3, model.cfg.image_height, model.cfg.image_width] {
            return Err(Error::Incompatible(vec![format!(
                "input images: model expects [3, {}, {}], dataset has {s:?}",
                model.cfg.image_height, model.cfg.image_width
            )]));
        }
    }
    if dataset.schema.class_counts() != model.schema.class_counts() {
        return Err(Error::Incompatible(vec![format!(
            "attribute schema: model has class counts {:?}, dataset has {:?}",
            model.schema.class_counts(),
            dataset.schema.class_counts()
        )]));
    }
    Ok(())
}

/// Fraction of a normalized map's mass that falls on `mask`.
pub fn mass_inside(map: &[f64], mask: &[bool]) -> f64 {
    map.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum()
}

/// Writes one rescaled graymap per attribute for `image [3, H, W]` into
/// `dir`, named `<attribute>.pgm`, and returns the paths in label order.
pub fn export_attention(model: &mut Model, image: &Tensor, dir: &Path) -> Result<Vec<PathBuf>> {
    let s = image.shape();
    if s != [3, model.cfg.image_height, model.cfg.image_width] {
        return Err(Error::Incompatible(vec![format!(
            "input image: model expects [3, {}, {}], got {s:?}",
            model.cfg.image_height, model.cfg.image_width
        )]));
    }
    let maps = model.attention_maps(&stack_images([image])?)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (hf, wf) = (model.cfg.feature_height(), model.cfg.feature_width());
    let mut paths = Vec::with_capacity(maps.len());
    for (attr, map) in model.schema.attributes().iter().zip(&maps) {
        let path = dir.join(format!("{}.pgm", attr.name));
        pnm::write_pgm_rescaled(&path, map.data(), hf, wf)?;
        paths.push(path);
    }
    Ok(paths)
}
