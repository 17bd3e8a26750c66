use std::collections::{HashMap, HashSet};

use anyhow::{anyhow, bail, Result};
use mid_core::analysis::{block_contrast, cosine_rsm, kmeans_fit, KMeansConfig, RsmInput, SortKey};
use mid_core::midt::Tensor;
use mid_core::nncore::{extract_embeddings, EmbeddingRecord};
use mid_core::synthgen::{encode_gray_png, Dataset, SpriteImage, IMAGE_SIZE};
use serde::{Deserialize, Serialize};

use crate::stages::{files, Pipeline, WindowArtifact};

/// Minority share of the samples with the given ids.
pub fn minority_fraction(train: &Dataset, ids: &[u64]) -> Result<f64> {
    if ids.is_empty() {
        bail!("no ids to summarize");
    }
    let index = train.index_by_id();
    let mut minority = 0;
    for id in ids {
        let &i = index.get(id).ok_or_else(|| anyhow!("unknown sample id {id}"))?;
        minority += train.samples[i].group().is_minority() as usize;
    }
    Ok(minority as f64 / ids.len() as f64)
}

fn union(windows: &[Vec<u64>]) -> Vec<u64> {
    let set: std::collections::BTreeSet<u64> = windows.iter().flatten().copied().collect();
    set.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowEnrichment {
    pub base_rate: f64,
    pub intercept_minority: f64,
    pub max_minority: f64,
}

impl WindowEnrichment {
    /// Intercept-window minority share over the max-window share.
    pub fn ratio(&self) -> f64 {
        self.intercept_minority / self.max_minority.max(f64::MIN_POSITIVE)
    }
}

/// Minority shares of the per-class windows, each pooled over classes.
pub fn window_enrichment(train: &Dataset, windows: &WindowArtifact) -> Result<WindowEnrichment> {
    Ok(WindowEnrichment {
        base_rate: minority_fraction(train, &train.ids())?,
        intercept_minority: minority_fraction(train, &union(&windows.intercept.per_class))?,
        max_minority: minority_fraction(train, &union(&windows.max_windows))?,
    })
}

/// Highest cluster minority share divided by the training-set minority
/// rate, clustering the embeddings of `ids` with `kcfg`.
pub fn best_cluster_enrichment(train: &Dataset, records: &[EmbeddingRecord], ids: &[u64], kcfg: &KMeansConfig) -> Result<f64> {
    let by_id: HashMap<u64, &EmbeddingRecord> = records.iter().map(|r| (r.sample_id, r)).collect();
    let emb: Vec<&[f32]> = ids
        .iter()
        .map(|id| by_id.get(id).map(|r| r.embedding.as_slice()).ok_or_else(|| anyhow!("no embedding for {id}")))
        .collect::<Result<_>>()?;
    let fit = kmeans_fit(&emb, kcfg)?;
    let base = minority_fraction(train, &train.ids())?;
    let mut best: f64 = 0.0;
    for c in 0..fit.k {
        let members: Vec<u64> = fit.members(c).into_iter().map(|i| ids[i]).collect();
        if !members.is_empty() {
            best = best.max(minority_fraction(train, &members)?);
        }
    }
    Ok(best / base.max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsmSummary {
    pub sort_key: SortKey,
    pub n: usize,
    pub order: Vec<u64>,
    pub keys: Vec<usize>,
    pub contrast: f64,
    pub matrix_file: String,
}

/// RSM of the ERM encoder over the first `n` fair-test samples, stored
/// as `rsm_<key>.midt` plus a JSON summary with the row order.
pub fn rsm_for_run(p: &Pipeline<'_>, run_id: &str, key: SortKey, n: usize) -> Result<RsmSummary> {
    let m = p.store.load_manifest(run_id)?;
    let ck = p.load_checkpoint(&m, "train", files::MODEL, files::MODEL_SIDECAR)?;
    let test = p.load_dataset(&m, files::TEST_DATA)?;
    let ids: Vec<u64> = test.ids().into_iter().take(n).collect();
    let subset = test.subset(&ids)?;
    let records = extract_embeddings(&ck.params, &subset)?;
    let inputs: Vec<RsmInput<'_>> = subset
        .samples
        .iter()
        .zip(&records)
        .map(|(s, r)| RsmInput { id: s.id, label: s.label, spurious: s.spurious.index(), embedding: &r.embedding })
        .collect();
    let rsm = cosine_rsm(&inputs, key)?;
    let contrast = block_contrast(&rsm, &rsm.key_boundaries())?;
    let stem = match key {
        SortKey::Label => "rsm_label",
        SortKey::SpuriousAttribute => "rsm_spurious",
    };
    let matrix_file = format!("{stem}.midt");
    let nn = rsm.n() as u64;
    p.store.write_artifact(run_id, &matrix_file, &Tensor::f32(vec![nn, nn], rsm.values.clone())?.to_bytes())?;
    let summary = RsmSummary { sort_key: key, n: rsm.n(), order: rsm.order.clone(), keys: rsm.keys.clone(), contrast, matrix_file };
    p.store.write_json(run_id, &format!("{stem}.json"), &summary)?;
    Ok(summary)
}

/// One tile of a montage.
#[derive(Clone)]
pub struct MontageTile<'a> {
    pub id: u64,
    pub image: &'a SpriteImage,
    pub logits: &'a [f32],
}

const GAP: usize = 2;

/// Grid of tiles, `per_row` across, separated by mid-grey gaps. Sample ids
/// and logits are stored as PNG text chunks.
pub fn export_montage(tiles: &[MontageTile<'_>], per_row: usize) -> Result<Vec<u8>> {
    if tiles.is_empty() {
        bail!("a montage needs at least one image");
    }
    if per_row == 0 {
        bail!("per_row must be at least 1");
    }
    let cols = per_row.min(tiles.len());
    let rows = tiles.len().div_ceil(per_row);
    let (w, h) = (cols * IMAGE_SIZE + (cols - 1) * GAP, rows * IMAGE_SIZE + (rows - 1) * GAP);
    let mut pixels = vec![128u8; w * h];
    for (t, tile) in tiles.iter().enumerate() {
        let (r, c) = (t / per_row, t % per_row);
        let (x0, y0) = (c * (IMAGE_SIZE + GAP), r * (IMAGE_SIZE + GAP));
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                pixels[(y0 + y) * w + x0 + x] = if tile.image.get(x, y) { 255 } else { 0 };
            }
        }
    }
    let ids: Vec<u64> = tiles.iter().map(|t| t.id).collect();
    let logits: Vec<&[f32]> = tiles.iter().map(|t| t.logits).collect();
    let text = vec![
        ("layout".to_string(), format!("{rows}x{cols}")),
        ("ids".to_string(), serde_json::to_string(&ids)?),
        ("logits".to_string(), serde_json::to_string(&logits)?),
    ];
    Ok(encode_gray_png(w as u32, h as u32, &pixels, &text))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Max,
    Intercept,
}

/// Montage of the first `limit` ids of one class window of a run.
pub fn montage_for_run(p: &Pipeline<'_>, run_id: &str, kind: WindowKind, class: usize, limit: usize, per_row: usize) -> Result<String> {
    let m = p.store.load_manifest(run_id)?;
    let windows: WindowArtifact = p.store.read_json(&m, "intercept", files::INTERCEPT)?;
    let ids = match kind {
        WindowKind::Max => windows.max_windows.get(class),
        WindowKind::Intercept => windows.intercept.per_class.get(class),
    }
    .ok_or_else(|| anyhow!("class {class} out of range"))?;
    let ids: Vec<u64> = ids.iter().copied().take(limit).collect();
    let train = p.load_dataset(&m, files::TRAIN_DATA)?;
    let records = p.load_embeddings(&m)?;
    let index = train.index_by_id();
    let by_id: HashMap<u64, &EmbeddingRecord> = records.iter().map(|r| (r.sample_id, r)).collect();
    let tiles = ids
        .iter()
        .map(|id| {
            let s = index.get(id).map(|&i| &train.samples[i]).ok_or_else(|| anyhow!("image for sample {id} is missing"))?;
            let r = by_id.get(id).ok_or_else(|| anyhow!("logits for sample {id} are missing"))?;
            Ok(MontageTile { id: *id, image: &s.image, logits: &r.logits })
        })
        .collect::<Result<Vec<_>>>()?;
    let name = format!("montage_{}_{class}.png", match kind { WindowKind::Max => "max", WindowKind::Intercept => "intercept" });
    p.store.write_artifact(run_id, &name, &export_montage(&tiles, per_row)?)?;
    Ok(name)
}

/// Ids present in both lists.
pub fn overlap(a: &[u64], b: &[u64]) -> usize {
    let set: HashSet<u64> = a.iter().copied().collect();
    b.iter().filter(|id| set.contains(id)).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mid_core::synthgen::{render_sprite, LatentPoint, Shape};

    #[test]
    fn montage_layout() {
        let img = render_sprite(&LatentPoint::new(Shape::Heart, 5, 0, 10, 10).unwrap());
        let logits = [0.5f32, -1.0, 2.0];
        let tiles: Vec<MontageTile<'_>> = (0..6).map(|id| MontageTile { id, image: &img, logits: &logits }).collect();
        let png = export_montage(&tiles, 6).unwrap();
        let decoder = png::Decoder::new(std::io::Cursor::new(png));
        let reader = decoder.read_info().unwrap();
        let info = reader.info();
        assert_eq!((info.width, info.height), (6 * 64 + 5 * 2, 64));
        assert!(info.uncompressed_latin1_text.iter().any(|t| t.keyword == "layout" && t.text == "1x6"));
        assert!(export_montage(&[], 6).is_err());
        let png7 = export_montage(&[tiles.as_slice(), &tiles[..1]].concat(), 6).unwrap();
        let r = png::Decoder::new(std::io::Cursor::new(png7)).read_info().unwrap();
        assert_eq!(r.info().height, 2 * 64 + 2);
    }
}
