//! Modality-conditioned encoder/decoder.
//!
//! Token input: `patch_proj(voxels) + pos(coords) + modality_proj(m)`. Every
//! normalization is a conditional layer norm
//! `(1 + W_g m + b_g) * LN(x) + (W_b m + b_b)` driven by the token's modality
//! embedding `m`. Blocks are pre-norm; attention never crosses sessions.
//! The decoder sees mapped visible latents plus one mask token per hidden
//! patch, each with decoder positional and modality terms re-injected, laid
//! out in patch-index order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Matrix, Tensor};
use crate::tokenizer::{grid_coords, grid_index, SessionTokens};
use crate::volume::{offset, Dims};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub d_enc: usize,
    pub d_dec: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: Dims,
    pub modality_dim: usize,
    /// Largest grid coordinate (exclusive) per axis for positional tables.
    pub max_grid: Dims,
    pub n_classes: usize,
    pub n_labels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            d_enc: 64,
            d_dec: 32,
            layers_enc: 4,
            layers_dec: 2,
            heads: 4,
            mlp_ratio: 4,
            patch_size: [16, 16, 16],
            modality_dim: crate::modality::DEFAULT_DIM,
            max_grid: [8, 8, 8],
            n_classes: 2,
            n_labels: 1,
        }
    }
}

impl NetConfig {
    pub fn patch_len(&self) -> usize {
        self.patch_size.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_enc % self.heads != 0 || self.d_dec % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_enc ({}) and d_dec ({})",
                self.heads, self.d_enc, self.d_dec
            )));
        }
        if self.d_enc == 0 || self.d_dec == 0 || self.modality_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.patch_size.contains(&0) || self.max_grid.contains(&0) {
            return Err(Error::Config("patch_size and max_grid must be positive".into()));
        }
        if self.n_classes == 0 || self.n_labels == 0 {
            return Err(Error::Config("n_classes and n_labels must be positive".into()));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a stable order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let p = self.patch_len();
        let (de, dd, dm) = (self.d_enc, self.d_dec, self.modality_dim);
        let mut push = |n: String, s: Vec<usize>| out.push((n, s));
        push("enc.patch.weight".into(), vec![p, de]);
        push("enc.patch.bias".into(), vec![de]);
        push("enc.modality.weight".into(), vec![dm, de]);
        for (a, axis) in ["x", "y", "z"].iter().enumerate() {
            push(format!("enc.pos.{axis}"), vec![self.max_grid[a], de]);
            push(format!("dec.pos.{axis}"), vec![self.max_grid[a], dd]);
        }
        let block = |push: &mut dyn FnMut(String, Vec<usize>), pre: &str, d: usize| {
            for norm in ["norm1", "norm2"] {
                for part in ["gamma", "beta"] {
                    push(format!("{pre}.{norm}.{part}.weight"), vec![dm, d]);
                    push(format!("{pre}.{norm}.{part}.bias"), vec![d]);
                }
            }
            for proj in ["q", "k", "v", "o"] {
                push(format!("{pre}.attn.{proj}.weight"), vec![d, d]);
                push(format!("{pre}.attn.{proj}.bias"), vec![d]);
            }
            let hidden = d * self.mlp_ratio;
            push(format!("{pre}.mlp.fc1.weight"), vec![d, hidden]);
            push(format!("{pre}.mlp.fc1.bias"), vec![hidden]);
            push(format!("{pre}.mlp.fc2.weight"), vec![hidden, d]);
            push(format!("{pre}.mlp.fc2.bias"), vec![d]);
        };
        for l in 0..self.layers_enc {
            block(&mut push, &format!("enc.blocks.{l}"), de);
        }
        for part in ["gamma", "beta"] {
            push(format!("enc.norm.{part}.weight"), vec![dm, de]);
            push(format!("enc.norm.{part}.bias"), vec![de]);
        }
        push("dec.embed.weight".into(), vec![de, dd]);
        push("dec.embed.bias".into(), vec![dd]);
        push("dec.mask_token".into(), vec![dd]);
        push("dec.modality.weight".into(), vec![dm, dd]);
        for l in 0..self.layers_dec {
            block(&mut push, &format!("dec.blocks.{l}"), dd);
        }
        for part in ["gamma", "beta"] {
            push(format!("dec.norm.{part}.weight"), vec![dm, dd]);
            push(format!("dec.norm.{part}.bias"), vec![dd]);
        }
        push("dec.recon.weight".into(), vec![dd, p]);
        push("dec.recon.bias".into(), vec![p]);
        push("head.cls.weight".into(), vec![de, self.n_classes]);
        push("head.cls.bias".into(), vec![self.n_classes]);
        push("head.seg.weight".into(), vec![de, p * self.n_labels]);
        push("head.seg.bias".into(), vec![p * self.n_labels]);
        out
    }
}

pub const INIT_STD: f64 = 0.02;

pub fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

pub fn is_decoder(name: &str) -> bool {
    name.starts_with("dec.")
}

fn is_cln_generator(name: &str) -> bool {
    name.contains(".gamma.") || name.contains(".beta.")
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Truncated-normal projections, zero CLN generators, heads and biases,
    /// unit-norm mask token. Each tensor has its own stream keyed by its name.
    pub fn init(cfg: &NetConfig, seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.param_shapes() {
            let mut t = Tensor::zeros(&shape);
            let mut s = Stream::derived(seed, &[rng::tag::INIT, rng::stable_hash(&name)]);
            if name == "dec.mask_token" {
                t.data.iter_mut().for_each(|x| *x = s.normal());
                let n = t.data.iter().map(|x| x * x).sum::<f64>().sqrt();
                t.data.iter_mut().for_each(|x| *x /= n);
            } else if !(is_head(&name) || is_cln_generator(&name) || name.ends_with(".bias")) {
                t.data.iter_mut().for_each(|x| *x = INIT_STD * s.truncated_normal());
            }
            tensors.insert(name, t);
        }
        Self { tensors }
    }

    /// Add `scale * N(0,1)` noise to every entry (used to exercise all paths in gradient checks).
    pub fn perturbed(&self, scale: f64, seed: u64) -> Self {
        let mut out = self.clone();
        for (name, t) in out.tensors.iter_mut() {
            let mut s = Stream::derived(seed, &[rng::tag::GRADCHECK, rng::stable_hash(name)]);
            t.data.iter_mut().for_each(|x| *x += scale * s.normal());
        }
        out
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter '{name}'")))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Check names and shapes against a config.
    pub fn check_compatible(&self, cfg: &NetConfig) -> Result<()> {
        let want = cfg.param_shapes();
        if want.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in want {
            let t = self.get(&name)?;
            if t.shape != shape {
                return Err(Error::Shape(format!("'{name}' has shape {:?}, expected {shape:?}", t.shape)));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// Parameters bound as leaves of one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub nodes: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn new(g: &mut Graph, params: &ModelParams) -> Self {
        let nodes = params
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), g.leaf(t.to_matrix())))
            .collect();
        Self { nodes }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    /// Collect gradients for every bound parameter (zeros where unused).
    pub fn gradients(&self, g: &Graph, grads: &crate::autodiff::Gradients, params: &ModelParams) -> BTreeMap<String, Tensor> {
        self.nodes
            .iter()
            .map(|(name, id)| {
                let t = &params.tensors[name];
                let m = grads.get(*id).cloned().unwrap_or_else(|| {
                    let (r, c) = g.value(*id).shape();
                    Matrix::zeros(r, c)
                });
                (name.clone(), Tensor::from_matrix(&t.shape, m))
            })
            .collect()
    }
}

/// Inputs for one encoder sequence.
#[derive(Debug, Clone)]
pub struct TokenInputs {
    /// `n x patch_len` voxel rows.
    pub voxels: Matrix,
    pub coords: Vec<[usize; 3]>,
    /// `n x modality_dim` conditioning rows.
    pub cond: Matrix,
    /// Ordering key (global patch index) per token.
    pub keys: Vec<usize>,
}

/// Tokens to reconstruct: positions and conditioning only.
#[derive(Debug, Clone)]
pub struct QueryInputs {
    pub coords: Vec<[usize; 3]>,
    pub cond: Matrix,
    pub keys: Vec<usize>,
}

impl QueryInputs {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

fn cond_rows(st: &SessionTokens, idx: &[usize]) -> Matrix {
    let dm = st.embeddings.first().map_or(0, |e| e.vector.len());
    let mut m = Matrix::zeros(idx.len(), dm);
    for (r, &i) in idx.iter().enumerate() {
        let mod_id = st.patches.patches[i].modality;
        m.row_mut(r).copy_from_slice(&st.embeddings[mod_id].vector);
    }
    m
}

/// Visible tokens of a session, in patch-index order.
pub fn visible_inputs(st: &SessionTokens) -> TokenInputs {
    let idx = st.visible();
    let plen = st.patches.patch_len();
    let mut voxels = Matrix::zeros(idx.len(), plen);
    for (r, &i) in idx.iter().enumerate() {
        voxels.row_mut(r).copy_from_slice(&st.patches.patches[i].voxels);
    }
    TokenInputs {
        voxels,
        coords: idx.iter().map(|&i| st.patches.patches[i].coords).collect(),
        cond: cond_rows(st, &idx),
        keys: idx,
    }
}

/// Hidden tokens of a session, in patch-index order.
pub fn hidden_queries(st: &SessionTokens) -> QueryInputs {
    let idx = st.hidden();
    QueryInputs {
        coords: idx.iter().map(|&i| st.patches.patches[i].coords).collect(),
        cond: cond_rows(st, &idx),
        keys: idx,
    }
}

fn check_coords(cfg: &NetConfig, coords: &[[usize; 3]]) -> Result<()> {
    for c in coords {
        for a in 0..3 {
            if c[a] >= cfg.max_grid[a] {
                return Err(Error::Range(format!(
                    "grid coordinate {c:?} exceeds positional table size {:?}",
                    cfg.max_grid
                )));
            }
        }
    }
    Ok(())
}

/// Factorized 3D positional code: the sum of one row from each axis table.
pub fn positional_code(coords: [usize; 3], tables: [&Matrix; 3]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; tables[0].cols];
    for a in 0..3 {
        if coords[a] >= tables[a].rows {
            return Err(Error::Range(format!(
                "coordinate {} on axis {a} exceeds table size {}",
                coords[a], tables[a].rows
            )));
        }
        for (o, v) in out.iter_mut().zip(tables[a].row(coords[a])) {
            *o += v;
        }
    }
    Ok(out)
}

fn positional(g: &mut Graph, p: &Bound, prefix: &str, coords: &[[usize; 3]]) -> NodeId {
    let mut acc = None;
    for (a, axis) in ["x", "y", "z"].iter().enumerate() {
        let rows = g.gather_rows(p.id(&format!("{prefix}.pos.{axis}")), coords.iter().map(|c| c[a]).collect());
        acc = Some(match acc {
            None => rows,
            Some(prev) => g.add(prev, rows),
        });
    }
    acc.expect("three axes")
}

/// Conditional layer norm on graph nodes.
pub fn cln_node(g: &mut Graph, p: &Bound, prefix: &str, x: NodeId, cond: NodeId) -> NodeId {
    let gamma = g.linear(cond, p.id(&format!("{prefix}.gamma.weight")), p.id(&format!("{prefix}.gamma.bias")));
    let gamma = g.add_scalar(gamma, 1.0);
    let beta = g.linear(cond, p.id(&format!("{prefix}.beta.weight")), p.id(&format!("{prefix}.beta.bias")));
    let xn = g.layer_norm(x);
    let scaled = g.mul(gamma, xn);
    g.add(scaled, beta)
}

/// Parameters of a single conditional layer norm.
#[derive(Debug, Clone)]
pub struct ClnParams {
    pub w_gamma: Matrix,
    pub b_gamma: Vec<f64>,
    pub w_beta: Matrix,
    pub b_beta: Vec<f64>,
}

/// `y = (1 + W_g m + b_g) * (x - mean) / sqrt(var + 1e-5) + W_b m + b_b`.
pub fn cln(x: &[f64], m: &[f64], p: &ClnParams) -> Vec<f64> {
    let mut g = Graph::new();
    let xs = g.leaf(Matrix::from_vec(1, x.len(), x.to_vec()));
    let ms = g.leaf(Matrix::from_vec(1, m.len(), m.to_vec()));
    let bound = Bound {
        nodes: BTreeMap::from([
            ("n.gamma.weight".to_string(), g.leaf(p.w_gamma.clone())),
            ("n.gamma.bias".to_string(), g.leaf(Matrix::from_vec(1, p.b_gamma.len(), p.b_gamma.clone()))),
            ("n.beta.weight".to_string(), g.leaf(p.w_beta.clone())),
            ("n.beta.bias".to_string(), g.leaf(Matrix::from_vec(1, p.b_beta.len(), p.b_beta.clone()))),
        ]),
    };
    let y = cln_node(&mut g, &bound, "n", xs, ms);
    g.value(y).data.clone()
}

fn block(g: &mut Graph, p: &Bound, pre: &str, x: NodeId, cond: NodeId, heads: usize) -> NodeId {
    let lin = |g: &mut Graph, x: NodeId, name: &str| {
        g.linear(x, p.id(&format!("{pre}.{name}.weight")), p.id(&format!("{pre}.{name}.bias")))
    };
    let h = cln_node(g, p, &format!("{pre}.norm1"), x, cond);
    let q = lin(g, h, "attn.q");
    let k = lin(g, h, "attn.k");
    let v = lin(g, h, "attn.v");
    let a = g.attention(q, k, v, heads);
    let o = lin(g, a, "attn.o");
    let x = g.add(x, o);
    let h = cln_node(g, p, &format!("{pre}.norm2"), x, cond);
    let f = lin(g, h, "mlp.fc1");
    let f = g.gelu(f);
    let f = lin(g, f, "mlp.fc2");
    g.add(x, f)
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `V x d_enc`, one row per visible token in key order.
    pub latents: NodeId,
    /// `1 x d_enc` mean over visible tokens.
    pub pooled: NodeId,
}

pub fn encode_tokens(g: &mut Graph, p: &Bound, cfg: &NetConfig, t: &TokenInputs, case_id: &str) -> Result<Encoded> {
    if t.coords.is_empty() {
        return Err(Error::EmptySession(case_id.to_string()));
    }
    check_coords(cfg, &t.coords)?;
    let x = g.leaf(t.voxels.clone());
    let cond = g.leaf(t.cond.clone());
    let h = g.linear(x, p.id("enc.patch.weight"), p.id("enc.patch.bias"));
    let pos = positional(g, p, "enc", &t.coords);
    let h = g.add(h, pos);
    let m = g.matmul(cond, p.id("enc.modality.weight"));
    let mut h = g.add(h, m);
    for l in 0..cfg.layers_enc {
        h = block(g, p, &format!("enc.blocks.{l}"), h, cond, cfg.heads);
    }
    let latents = cln_node(g, p, "enc.norm", h, cond);
    let pooled = g.mean_rows(latents);
    Ok(Encoded { latents, pooled })
}

pub fn encode_session(g: &mut Graph, p: &Bound, cfg: &NetConfig, st: &SessionTokens) -> Result<Encoded> {
    encode_tokens(g, p, cfg, &visible_inputs(st), &st.case_id)
}

/// Reconstruct the queried patches (`H x patch_len`, in query key order).
/// Returns `None` when there is nothing to reconstruct.
pub fn decode_tokens(
    g: &mut Graph,
    p: &Bound,
    cfg: &NetConfig,
    visible: &TokenInputs,
    latents: NodeId,
    queries: &QueryInputs,
) -> Result<Option<NodeId>> {
    if queries.is_empty() {
        return Ok(None);
    }
    check_coords(cfg, &queries.coords)?;
    let n_vis = visible.coords.len();
    let vis = g.linear(latents, p.id("dec.embed.weight"), p.id("dec.embed.bias"));
    let mask = g.repeat_row(p.id("dec.mask_token"), queries.len());
    let base = g.concat_rows(vec![vis, mask]);

    // sort the joint sequence by key so token order never depends on enumeration order
    let mut keyed: Vec<(usize, usize)> = visible
        .keys
        .iter()
        .chain(&queries.keys)
        .enumerate()
        .map(|(row, k)| (*k, row))
        .collect();
    keyed.sort_unstable();
    let order: Vec<usize> = keyed.iter().map(|(_, r)| *r).collect();
    let coords: Vec<[usize; 3]> = visible.coords.iter().chain(&queries.coords).copied().collect();
    let sorted_coords: Vec<[usize; 3]> = order.iter().map(|&r| coords[r]).collect();
    let mut cond_all = Matrix::zeros(order.len(), cfg.modality_dim);
    for (dst, &r) in order.iter().enumerate() {
        let src = if r < n_vis { visible.cond.row(r) } else { queries.cond.row(r - n_vis) };
        cond_all.row_mut(dst).copy_from_slice(src);
    }

    let h = g.gather_rows(base, order.clone());
    let cond = g.leaf(cond_all);
    let pos = positional(g, p, "dec", &sorted_coords);
    let h = g.add(h, pos);
    let m = g.matmul(cond, p.id("dec.modality.weight"));
    let mut h = g.add(h, m);
    for l in 0..cfg.layers_dec {
        h = block(g, p, &format!("dec.blocks.{l}"), h, cond, cfg.heads);
    }
    let h = cln_node(g, p, "dec.norm", h, cond);

    let mut query_rows = vec![0usize; queries.len()];
    for (pos_in_seq, &r) in order.iter().enumerate() {
        if r >= n_vis {
            query_rows[r - n_vis] = pos_in_seq;
        }
    }
    let hq = g.gather_rows(h, query_rows);
    Ok(Some(g.linear(hq, p.id("dec.recon.weight"), p.id("dec.recon.bias"))))
}

pub fn decode_session(g: &mut Graph, p: &Bound, cfg: &NetConfig, st: &SessionTokens, enc: &Encoded) -> Result<Option<NodeId>> {
    decode_tokens(g, p, cfg, &visible_inputs(st), enc.latents, &hidden_queries(st))
}

pub fn head_classify(g: &mut Graph, p: &Bound, pooled: NodeId) -> NodeId {
    g.linear(pooled, p.id("head.cls.weight"), p.id("head.cls.bias"))
}

/// Patch-wise projection of a full-grid latent matrix (`grid_len x d_enc`)
/// to `grid_len x (patch_len * n_labels)` voxel logits.
pub fn head_segment(g: &mut Graph, p: &Bound, cfg: &NetConfig, grid: Dims, full_latents: NodeId) -> Result<NodeId> {
    let n = grid[0] * grid[1] * grid[2];
    let rows = g.value(full_latents).rows;
    if rows != n {
        return Err(Error::Shape(format!("segmentation head needs {n} patch latents, got {rows}")));
    }
    if cfg.n_labels == 0 {
        return Err(Error::Config("n_labels must be positive".into()));
    }
    Ok(g.linear(full_latents, p.id("head.seg.weight"), p.id("head.seg.bias")))
}

/// Full-grid latents for the segmentation head: each grid cell holds the
/// mean latent of its visible tokens across modalities, or zeros when no
/// modality has a visible token there.
pub fn grid_latents(g: &mut Graph, grid: Dims, coords: &[[usize; 3]], latents: NodeId) -> NodeId {
    let n = grid[0] * grid[1] * grid[2];
    let mut count = vec![0usize; n];
    for c in coords {
        count[grid_index(grid, *c)] += 1;
    }
    let mut avg = Matrix::zeros(n, coords.len());
    for (t, c) in coords.iter().enumerate() {
        let gi = grid_index(grid, *c);
        avg.data[gi * coords.len() + t] = 1.0 / count[gi] as f64;
    }
    let a = g.leaf(avg);
    g.matmul(a, latents)
}

/// Classification logits (`1 x n_classes`) for a fully visible session.
pub fn classify_session(g: &mut Graph, p: &Bound, cfg: &NetConfig, st: &SessionTokens) -> Result<NodeId> {
    let enc = encode_session(g, p, cfg, st)?;
    Ok(head_classify(g, p, enc.pooled))
}

/// Segmentation logits (`grid_len x patch_len * n_labels`) for a session.
pub fn segment_session(g: &mut Graph, p: &Bound, cfg: &NetConfig, st: &SessionTokens) -> Result<NodeId> {
    let vis = visible_inputs(st);
    let enc = encode_tokens(g, p, cfg, &vis, &st.case_id)?;
    let full = grid_latents(g, st.patches.grid, &vis.coords, enc.latents);
    head_segment(g, p, cfg, st.patches.grid, full)
}

/// Reassemble one channel of per-patch rows (`grid_len x patch_len * channels`) into a volume.
pub fn patches_to_volume(rows: &Matrix, grid: Dims, patch: Dims, channel: usize) -> Vec<f64> {
    let dims = [grid[0] * patch[0], grid[1] * patch[1], grid[2] * patch[2]];
    let plen = patch[0] * patch[1] * patch[2];
    let mut out = vec![0.0; dims[0] * dims[1] * dims[2]];
    for gi in 0..rows.rows {
        let c = grid_coords(grid, gi);
        let row = rows.row(gi);
        let mut k = 0;
        for i in 0..patch[0] {
            for j in 0..patch[1] {
                for l in 0..patch[2] {
                    let v = row[channel * plen + k];
                    out[offset(dims, c[0] * patch[0] + i, c[1] * patch[1] + j, c[2] * patch[2] + l)] = v;
                    k += 1;
                }
            }
        }
    }
    out
}

/// Inverse of [`patches_to_volume`] for one channel.
pub fn volume_to_patches(voxels: &[f64], grid: Dims, patch: Dims) -> Matrix {
    let dims = [grid[0] * patch[0], grid[1] * patch[1], grid[2] * patch[2]];
    let plen = patch[0] * patch[1] * patch[2];
    let n = grid[0] * grid[1] * grid[2];
    let mut m = Matrix::zeros(n, plen);
    for gx in 0..grid[0] {
        for gy in 0..grid[1] {
            for gz in 0..grid[2] {
                let gi = grid_index(grid, [gx, gy, gz]);
                let row = m.row_mut(gi);
                let mut k = 0;
                for i in 0..patch[0] {
                    for j in 0..patch[1] {
                        for l in 0..patch[2] {
                            row[k] = voxels[offset(dims, gx * patch[0] + i, gy * patch[1] + j, gz * patch[2] + l)];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    m
}
