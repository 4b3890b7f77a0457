//! Screen encoding: a coverage-weighted raster of object attributes stands
//! in for a pixel backbone, region pooling maps it back to objects, and a
//! self-attention stack fuses pooled and attribute features.

use thiserror::Error;

use crate::agent::ModelConfig;
use crate::autograd::{Graph, NodeId};
use crate::nn::{EncoderBlock, Init, LayerNorm, Linear};
use crate::screen::{BBox, ObjType, Screen, UiObject};
use crate::tensor::{ParamId, Tensor};
use crate::vocab::{Vocab, EMPTY_ID};

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("screen has {0} objects, the encoder accepts at most {1}")]
    TooManyObjects(usize, usize),
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
}

/// Raster channels: type one-hot, clickable, leaf.
pub const RASTER_CHANNELS: usize = ObjType::COUNT + 2;

/// Per-cell channel sums over an `h`×`w` grid on the unit square. Row `i`
/// spans y in [i/h, (i+1)/h), column `j` spans x in [j/w, (j+1)/w).
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl RasterGrid {
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.w + j) * RASTER_CHANNELS;
        &self.data[o..o + RASTER_CHANNELS]
    }

    pub fn cell_box(&self, i: usize, j: usize) -> BBox {
        cell_box(self.h, self.w, i, j)
    }
}

fn cell_box(h: usize, w: usize, i: usize, j: usize) -> BBox {
    BBox::new(j as f64 / w as f64, i as f64 / h as f64, (j + 1) as f64 / w as f64, (i + 1) as f64 / h as f64)
}

/// Attribute vector an object paints into the raster.
pub fn raster_features(o: &UiObject) -> [f64; RASTER_CHANNELS] {
    let mut f = [0.0; RASTER_CHANNELS];
    f[o.obj_type.index()] = 1.0;
    f[ObjType::COUNT] = f64::from(u8::from(o.clickable));
    f[ObjType::COUNT + 1] = f64::from(u8::from(o.leaf));
    f
}

/// Index range of cells along one axis that a span [lo, hi] can touch.
fn cell_range(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let a = ((lo * n as f64).floor().max(0.0) as usize).min(n);
    let b = ((hi * n as f64).ceil().max(0.0) as usize).min(n);
    a..b
}

/// Every object adds its attribute vector to each cell it overlaps, weighted
/// by the fraction of the cell it covers.
pub fn rasterize(screen: &Screen, h: usize, w: usize) -> RasterGrid {
    let mut data = vec![0.0; h * w * RASTER_CHANNELS];
    let cell_area = 1.0 / (h * w) as f64;
    for o in &screen.objects {
        let f = raster_features(o);
        for i in cell_range(o.bbox.ymin, o.bbox.ymax, h) {
            for j in cell_range(o.bbox.xmin, o.bbox.xmax, w) {
                let cover = o.bbox.intersection_area(&cell_box(h, w, i, j)) / cell_area;
                if cover == 0.0 {
                    continue;
                }
                let cell = &mut data[(i * w + j) * RASTER_CHANNELS..(i * w + j + 1) * RASTER_CHANNELS];
                for (c, v) in cell.iter_mut().zip(f) {
                    *c += cover * v;
                }
            }
        }
    }
    RasterGrid { h, w, data }
}

/// Mean of the cells under `bbox`, each weighted by its overlap area.
/// Cells are visited in row-major order.
pub fn roi_pool(grid: &RasterGrid, bbox: &BBox) -> Result<[f64; RASTER_CHANNELS], EncodeError> {
    if !bbox.is_proper() {
        return Err(EncodeError::DegenerateBox(bbox.to_array()));
    }
    let mut acc = [0.0; RASTER_CHANNELS];
    let mut total = 0.0;
    for i in cell_range(bbox.ymin, bbox.ymax, grid.h) {
        for j in cell_range(bbox.xmin, bbox.xmax, grid.w) {
            let wgt = bbox.intersection_area(&grid.cell_box(i, j));
            if wgt == 0.0 {
                continue;
            }
            total += wgt;
            for (a, v) in acc.iter_mut().zip(grid.cell(i, j)) {
                *a += wgt * v;
            }
        }
    }
    if total > 0.0 {
        for a in &mut acc {
            *a /= total;
        }
    }
    Ok(acc)
}

/// Elementwise max over the rows of `table` named by `ids`; the empty
/// sequence maps to the `<empty>` row.
pub fn embed_text(table: &Tensor, ids: &[usize]) -> Vec<f64> {
    let ids = if ids.is_empty() { &[EMPTY_ID][..] } else { ids };
    let mut out = table.row(ids[0]).to_vec();
    for &i in &ids[1..] {
        for (o, v) in out.iter_mut().zip(table.row(i)) {
            *o = o.max(*v);
        }
    }
    out
}

/// Model-independent inputs derived from one screen.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenFeatures {
    pub n: usize,
    pub roi: Tensor,
    pub bbox: Tensor,
    pub dom: Tensor,
    pub types: Vec<usize>,
    pub clickable: Vec<usize>,
    pub leaf: Vec<usize>,
    pub text: Vec<Vec<usize>>,
    pub resource_id: Vec<Vec<usize>>,
}

fn token_ids(vocab: &Vocab, tokens: &[String]) -> Vec<usize> {
    if tokens.is_empty() {
        vec![EMPTY_ID]
    } else {
        vocab.ids(tokens)
    }
}

pub fn screen_features(screen: &Screen, vocab: &Vocab, cfg: &ModelConfig) -> Result<ScreenFeatures, EncodeError> {
    let n = screen.objects.len();
    if n > cfg.max_objects {
        return Err(EncodeError::TooManyObjects(n, cfg.max_objects));
    }
    let grid = rasterize(screen, cfg.grid_h, cfg.grid_w);
    let mut roi = Tensor::zeros(n, RASTER_CHANNELS);
    let mut bbox = Tensor::zeros(n, 4);
    let mut dom = Tensor::zeros(n, 2);
    for (k, o) in screen.objects.iter().enumerate() {
        roi.row_mut(k).copy_from_slice(&roi_pool(&grid, &o.bbox)?);
        bbox.row_mut(k).copy_from_slice(&o.bbox.to_array());
        let scale = cfg.max_objects as f64;
        dom.row_mut(k).copy_from_slice(&[o.dom_pre as f64 / scale, o.dom_post as f64 / scale]);
    }
    Ok(ScreenFeatures {
        n,
        roi,
        bbox,
        dom,
        types: screen.objects.iter().map(|o| o.obj_type.index()).collect(),
        clickable: screen.objects.iter().map(|o| usize::from(o.clickable)).collect(),
        leaf: screen.objects.iter().map(|o| usize::from(o.leaf)).collect(),
        text: screen.objects.iter().map(|o| token_ids(vocab, &o.text)).collect(),
        resource_id: screen.objects.iter().map(|o| token_ids(vocab, &o.resource_id)).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    /// Token table shared with the decoder.
    pub tok: ParamId,
    pub roi: Linear,
    pub bbox: Linear,
    pub dom: Linear,
    pub obj_type: ParamId,
    pub clickable: ParamId,
    pub leaf: ParamId,
    pub input: Linear,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln: LayerNorm,
}

impl EncoderParams {
    pub fn new(init: &mut Init, cfg: &ModelConfig, vocab_size: usize) -> Self {
        let emb = 0.5;
        let tok = init.table("enc.tok", vocab_size, cfg.d_tok, emb);
        let roi = Linear::new(init, "enc.roi", RASTER_CHANNELS, cfg.d_feat);
        let bbox = Linear::new(init, "enc.bbox", 4, cfg.d_feat);
        let dom = Linear::new(init, "enc.dom", 2, cfg.d_flag);
        let obj_type = init.table("enc.type", ObjType::COUNT, cfg.d_feat, emb);
        let clickable = init.table("enc.clickable", 2, cfg.d_flag, emb);
        let leaf = init.table("enc.leaf", 2, cfg.d_flag, emb);
        let width = 3 * cfg.d_feat + 3 * cfg.d_flag + 2 * cfg.d_tok;
        let input = Linear::new(init, "enc.in", width, cfg.d_model);
        let pos = init.table("enc.pos", cfg.max_objects, cfg.d_model, 0.1);
        let blocks = (0..cfg.enc_layers)
            .map(|l| EncoderBlock::new(init, &format!("enc.block{l}"), cfg.d_model, cfg.heads, cfg.d_ff))
            .collect();
        let ln = LayerNorm::new(init, "enc.ln", cfg.d_model);
        Self { tok, roi, bbox, dom, obj_type, clickable, leaf, input, pos, blocks, ln }
    }

    /// Object encodings v (n × d_model), in object order.
    pub fn forward(&self, g: &mut Graph, f: &ScreenFeatures) -> NodeId {
        let roi_in = g.input(f.roi.clone());
        let roi = self.roi.forward(g, roi_in);
        let bbox_in = g.input(f.bbox.clone());
        let bbox = self.bbox.forward(g, bbox_in);
        let ty = g.gather(self.obj_type, &f.types);
        let click = g.gather(self.clickable, &f.clickable);
        let leaf = g.gather(self.leaf, &f.leaf);
        let text = g.max_pool_rows(self.tok, &f.text);
        let rid = g.max_pool_rows(self.tok, &f.resource_id);
        let dom_in = g.input(f.dom.clone());
        let dom = self.dom.forward(g, dom_in);
        let cat = g.concat_cols(&[roi, bbox, ty, click, leaf, text, rid, dom]);
        let x = self.input.forward(g, cat);
        let idx: Vec<usize> = (0..f.n).collect();
        let pos = g.gather(self.pos, &idx);
        let mut x = g.add(x, pos);
        x = g.dropout(x);
        for b in &self.blocks {
            x = b.forward(g, x);
        }
        self.ln.forward(g, x)
    }
}
