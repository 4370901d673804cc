use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{
    gelu, gelu_backward, matmul_nn, matmul_nt, matmul_tn_acc, softmax_rows, softmax_rows_backward, AttnCache,
    Attention, Linear, Mat, Norm, NormCache,
};
use super::{ModelConfig, NetworkError, Result};
use crate::assignment::{LossGrads, MEMBERSHIP_THRESHOLD};
use crate::geometry::{Vec3, FROBENIUS_WEIGHTS, QUADRATIC_BLOCK};

const COEFF_ZERO: f64 = 1e-12;

/// Point in the forward pass from which a parameter's effect starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Encoder,
    Decoder,
    Memory,
    /// Key/value projections of a block's cross-attention.
    CrossKv(usize),
    Block(usize),
    /// Patch-side membership embedding.
    PatchEmbed,
    Heads,
}

/// Named contiguous parameter range.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    a: Linear,
    b: Linear,
}

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    ln1: Norm,
    cross: Attention,
    ln2: Norm,
    selfa: Attention,
    ln3: Norm,
    ff: Mlp,
}

#[derive(Debug, Clone)]
struct Layout {
    enc1: Linear,
    enc2: Linear,
    glob: Linear,
    queries: usize,
    key: Linear,
    value: Linear,
    enc_ln: Norm,
    dec: Mlp,
    mem: Mlp,
    proxies: usize,
    blocks: Vec<BlockLayout>,
    final_ln: Norm,
    sem: Mlp,
    memr: Mlp,
    memt: Mlp,
    geo: Mlp,
    groups: Vec<ParamGroup>,
    total: usize,
}

struct Alloc {
    n: usize,
    groups: Vec<ParamGroup>,
    stage: Stage,
}

impl Alloc {
    fn take(&mut self, name: &str, len: usize) -> usize {
        let start = self.n;
        self.groups.push(ParamGroup { name: name.to_string(), start, len, stage: self.stage });
        self.n += len;
        start
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> Linear {
        let w = self.take(&format!("{name}.weight"), inp * out);
        let b = self.take(&format!("{name}.bias"), out);
        Linear { w, b, inp, out }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        let gamma = self.take(&format!("{name}.gamma"), dim);
        let beta = self.take(&format!("{name}.beta"), dim);
        Norm { gamma, beta, dim }
    }

    fn mlp(&mut self, name: &str, inp: usize, hidden: usize, out: usize) -> Mlp {
        Mlp { a: self.linear(&format!("{name}.0"), inp, hidden), b: self.linear(&format!("{name}.1"), hidden, out) }
    }

    fn attention(&mut self, name: &str, d: usize, heads: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
            heads,
        }
    }
}

impl Layout {
    fn new(c: &ModelConfig) -> Layout {
        let d = c.d;
        let mut a = Alloc { n: 0, groups: Vec::new(), stage: Stage::Encoder };
        let enc1 = a.linear("encoder.point_mlp.0", 3, d);
        let enc2 = a.linear("encoder.point_mlp.1", d, d);
        let glob = a.linear("encoder.global", d, d);
        let queries = a.take("encoder.queries", c.u * d);
        let key = a.linear("encoder.key", d, d);
        let value = a.linear("encoder.value", d, d);
        let enc_ln = a.norm("encoder.norm", d);
        a.stage = Stage::Decoder;
        let dec = a.mlp("point_decoder", d, d, 3 + 3 * c.j);
        a.stage = Stage::Memory;
        let mem = a.mlp("context.memory", d, d, d);
        a.stage = Stage::Block(0);
        let proxies = a.take("context.proxies", c.k * d);
        let mut blocks = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            a.stage = Stage::Block(l);
            let p = format!("context.block{l}");
            blocks.push(BlockLayout {
                ln1: a.norm(&format!("{p}.norm1"), d),
                cross: {
                    let q = a.linear(&format!("{p}.cross_attn.q"), d, d);
                    a.stage = Stage::CrossKv(l);
                    let k = a.linear(&format!("{p}.cross_attn.k"), d, d);
                    let v = a.linear(&format!("{p}.cross_attn.v"), d, d);
                    a.stage = Stage::Block(l);
                    let o = a.linear(&format!("{p}.cross_attn.o"), d, d);
                    Attention { q, k, v, o, heads: c.heads }
                },
                ln2: a.norm(&format!("{p}.norm2"), d),
                selfa: a.attention(&format!("{p}.self_attn"), d, c.heads),
                ln3: a.norm(&format!("{p}.norm3"), d),
                ff: a.mlp(&format!("{p}.ffn"), d, 2 * d, d),
            });
        }
        a.stage = Stage::Heads;
        let final_ln = a.norm("context.final_norm", d);
        let sem = a.mlp("heads.semantic", d, d, c.type_count);
        let memr = a.mlp("heads.membership_proxy", d, d, d);
        a.stage = Stage::PatchEmbed;
        let memt = a.mlp("heads.membership_patch", d, d, d);
        a.stage = Stage::Heads;
        let geo = a.mlp("heads.geometry", d, d, 10);
        Layout {
            enc1,
            enc2,
            glob,
            queries,
            key,
            value,
            enc_ln,
            dec,
            mem,
            proxies,
            blocks,
            final_ln,
            sem,
            memr,
            memt,
            geo,
            groups: a.groups,
            total: a.n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    /// Divides every contextualization attention score.
    pub temperature: f64,
    /// Replays the max-pool winners of an earlier pass.
    pub pool_argmax: Option<Vec<usize>>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { temperature: 1.0, pool_argmax: None }
    }
}

#[derive(Debug, Clone, Default)]
struct MlpCache {
    x: Mat,
    h: Mat,
    a: Mat,
}

#[derive(Debug, Clone)]
struct EncCache {
    x: Mat,
    h1: Mat,
    a1: Mat,
    h2: Mat,
    f: Mat,
    g: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Mat,
    ln: NormCache,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: NormCache,
    cross: AttnCache,
    ln2: NormCache,
    selfa: AttnCache,
    ln3: NormCache,
    ff: MlpCache,
}

#[derive(Debug, Clone)]
struct HeadCache {
    final_ln: NormCache,
    sem: MlpCache,
    memr: MlpCache,
    memt: MlpCache,
    a: Mat,
    b: Mat,
    geo: MlpCache,
    norms: Vec<f64>,
    signs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Cache {
    enc: EncCache,
    dec: MlpCache,
    mem: MlpCache,
    blocks: Vec<BlockCache>,
    heads: HeadCache,
}

/// Result of a forward pass. Row-major: `probs` is K × type_count,
/// `membership` K × U, `points` U × J patch-major.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: Mat,
    pub points: Vec<Vec3>,
    pub proxies: Mat,
    pub probs: Mat,
    pub membership: Mat,
    pub theta_raw: Vec<[f64; 10]>,
    pub theta: Vec<[f64; 10]>,
    pub pool_argmax: Vec<usize>,
    memory: Mat,
    cross_kv: Vec<(Mat, Mat)>,
    patch_embed: Mat,
    states: Vec<Mat>,
    cache: Option<Box<Cache>>,
}

impl ForwardOutput {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn drop_cache(&mut self) {
        self.cache = None;
    }
}

/// Patches whose membership reaches the threshold, boundary inclusive.
pub fn inlier_sets(row: &[f64]) -> Vec<usize> {
    (0..row.len()).filter(|&u| row[u] >= MEMBERSHIP_THRESHOLD).collect()
}

/// Model configuration, parameter layout and flat parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

fn mlp_forward(m: &Mlp, x: &Mat, p: &[f64]) -> (Mat, MlpCache) {
    let h = m.a.forward(x, p);
    let a = gelu(&h);
    let y = m.b.forward(&a, p);
    (y, MlpCache { x: x.clone(), h, a })
}

fn mlp_backward(m: &Mlp, c: &MlpCache, dy: &Mat, p: &[f64], g: &mut [f64]) -> Mat {
    let da = m.b.backward(&c.a, dy, p, g);
    let dh = gelu_backward(&c.h, &da);
    m.a.backward(&c.x, &dh, p, g)
}

fn vec3_mat(points: &[Vec3]) -> Mat {
    Mat::from_vec(points.len(), 3, points.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
}

/// Input points in lexicographic order, so reductions see a fixed sequence.
fn sorted_input(points: &[Vec3]) -> Mat {
    let mut v = points.to_vec();
    v.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z)));
    vec3_mat(&v)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; layout.total];
        for g in &layout.groups {
            let slice = &mut params[g.start..g.start + g.len];
            if g.name.ends_with(".gamma") {
                slice.fill(1.0);
            } else if g.name.ends_with(".beta") || g.name.ends_with(".bias") {
                slice.fill(0.0);
            } else if g.name.ends_with(".weight") {
                let fan_in = g.len / out_dim(&layout, g.start);
                let a = 1.0 / (fan_in as f64).sqrt();
                slice.iter_mut().for_each(|v| *v = rng.random_range(-a..a));
            } else {
                slice.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            }
        }
        Ok(Model { config, params, layout })
    }

    /// Builds a model around existing parameters.
    pub fn with_params(config: ModelConfig, params: Vec<f64>) -> Result<Model> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(NetworkError::Config(format!("expected {} parameters, got {}", layout.total, params.len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(NetworkError::Config("non-finite parameter".into()));
        }
        Ok(Model { config, params, layout })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.layout.groups
    }

    /// Shared feature bank T (U × d) for a partial scan.
    pub fn encode(&self, partial: &[Vec3]) -> Mat {
        self.encode_impl(&sorted_input(partial), None).0
    }

    pub fn decode_points(&self, features: &Mat) -> Vec<Vec3> {
        self.decode_impl(features).0
    }

    /// Contextualized proxies 𝓡 (K × d) before the final normalization.
    pub fn contextualize(&self, features: &Mat, temperature: f64) -> Mat {
        let mem = mlp_forward(&self.layout.mem, features, &self.params).0;
        let mut r = self.initial_proxies();
        for l in 0..self.config.layers {
            let kv = self.layout.blocks[l].cross.project_kv(&mem, &self.params);
            r = self.block_impl(l, &r, &mem, kv, temperature).0;
        }
        r
    }

    /// Messages produced by the first cross-attention for each proxy.
    pub fn cross_messages(&self, features: &Mat, temperature: f64) -> Mat {
        let p = &self.params;
        let mem = mlp_forward(&self.layout.mem, features, p).0;
        let b = &self.layout.blocks[0];
        let (n1, _) = b.ln1.forward(&self.initial_proxies(), p);
        b.cross.forward(&n1, &mem, p, temperature).0
    }

    /// Type distributions, membership matrix, and raw and canonical quadrics.
    pub fn heads(&self, proxies: &Mat, features: &Mat) -> (Mat, Mat, Vec<[f64; 10]>, Vec<[f64; 10]>) {
        let h = self.heads_impl(proxies, features, None);
        (h.probs, h.membership, h.theta_raw, h.theta)
    }

    pub fn forward(&self, partial: &[Vec3], opts: &ForwardOptions) -> ForwardOutput {
        self.run(Some(&sorted_input(partial)), None, Stage::Encoder, opts, true)
    }

    pub fn infer(&self, partial: &[Vec3]) -> ForwardOutput {
        self.run(Some(&sorted_input(partial)), None, Stage::Encoder, &ForwardOptions::default(), false)
    }

    /// Recomputes from `stage` on, reusing everything upstream from `prev`.
    pub fn forward_from(&self, prev: &ForwardOutput, stage: Stage, opts: &ForwardOptions) -> ForwardOutput {
        let input = prev.cache.as_ref().map(|c| c.enc.x.clone());
        self.run(input.as_ref(), Some(prev), stage, opts, false)
    }

    fn initial_proxies(&self) -> Mat {
        let n = self.config.k * self.config.d;
        Mat::from_vec(self.config.k, self.config.d, self.params[self.layout.proxies..self.layout.proxies + n].to_vec())
    }

    fn run(
        &self,
        input: Option<&Mat>,
        prev: Option<&ForwardOutput>,
        from: Stage,
        opts: &ForwardOptions,
        keep: bool,
    ) -> ForwardOutput {
        let prev_or = |what: &str| prev.unwrap_or_else(|| panic!("staged forward needs a previous {what}"));
        let redo = |s: Stage| prev.is_none() || from <= s;
        let (features, pool_argmax, enc) = if redo(Stage::Encoder) {
            let x = input.expect("encoder input");
            let argmax = opts.pool_argmax.as_deref().or(prev.map(|p| p.pool_argmax.as_slice()));
            let (t, c) = self.encode_impl(x, argmax);
            let am = c.pool_argmax.clone();
            (t, am, Some(c.cache))
        } else {
            let p = prev_or("encoder");
            (p.features.clone(), p.pool_argmax.clone(), None)
        };
        let (points, dec) = if redo(Stage::Decoder) {
            let (pts, c) = self.decode_impl(&features);
            (pts, Some(c))
        } else {
            (prev_or("decoder").points.clone(), None)
        };
        if from == Stage::Decoder && prev.is_some() {
            let p = prev_or("pass");
            return ForwardOutput { points, cache: None, ..p.clone() };
        }
        let (memory, mem_cache) = if redo(Stage::Memory) {
            let (m, c) = mlp_forward(&self.layout.mem, &features, &self.params);
            (m, Some(c))
        } else {
            (prev_or("memory").memory.clone(), None)
        };
        let layers = self.config.layers;
        let first_block = match (prev, from) {
            (None, _) | (_, Stage::Encoder | Stage::Decoder | Stage::Memory) => 0,
            (_, Stage::CrossKv(l) | Stage::Block(l)) => l,
            (_, Stage::PatchEmbed | Stage::Heads) => layers,
        };
        let mut states = vec![self.initial_proxies()];
        let mut cross_kv = Vec::with_capacity(layers);
        let mut block_caches = Vec::new();
        for l in 0..layers {
            let kv = if redo(Stage::Memory) || from == Stage::CrossKv(l) {
                self.layout.blocks[l].cross.project_kv(&memory, &self.params)
            } else {
                prev_or("projection").cross_kv[l].clone()
            };
            if l >= first_block {
                let (next, c) = self.block_impl(l, &states[l], &memory, kv.clone(), opts.temperature);
                states.push(next);
                block_caches.push(c);
            } else {
                states.push(prev_or("block").states[l + 1].clone());
            }
            cross_kv.push(kv);
        }
        let reuse = prev.filter(|_| !redo(Stage::Decoder) && from != Stage::PatchEmbed).map(|p| &p.patch_embed);
        let h = self.heads_impl(states.last().expect("proxy state"), &features, reuse);
        let patch_embed = h.cache.b.clone();
        let cache = match (keep, enc, dec, mem_cache) {
            (true, Some(enc), Some(dec), Some(mem)) => {
                Some(Box::new(Cache { enc, dec, mem, blocks: block_caches, heads: h.cache }))
            }
            _ => None,
        };
        ForwardOutput {
            features,
            points,
            proxies: h.proxies,
            probs: h.probs,
            membership: h.membership,
            theta_raw: h.theta_raw,
            theta: h.theta,
            pool_argmax,
            memory,
            cross_kv,
            patch_embed,
            states,
            cache,
        }
    }

    fn encode_impl(&self, x: &Mat, argmax: Option<&[usize]>) -> (Mat, EncOut) {
        let (p, lay, d) = (&self.params, &self.layout, self.config.d);
        let h1 = lay.enc1.forward(x, p);
        let a1 = gelu(&h1);
        let h2 = lay.enc2.forward(&a1, p);
        let f = gelu(&h2);
        let pool_argmax: Vec<usize> = match argmax {
            Some(a) => a.to_vec(),
            None => (0..d)
                .map(|c| {
                    let mut best = 0;
                    for r in 1..f.rows {
                        if f.at(r, c) > f.at(best, c) {
                            best = r;
                        }
                    }
                    best
                })
                .collect(),
        };
        let g = Mat::from_vec(1, d, (0..d).map(|c| f.at(pool_argmax[c], c)).collect());
        let gl = lay.glob.forward(&g, p);
        let mut q = Mat::from_vec(self.config.u, d, p[lay.queries..lay.queries + self.config.u * d].to_vec());
        for r in 0..q.rows {
            for (v, b) in q.row_mut(r).iter_mut().zip(gl.row(0)) {
                *v += b;
            }
        }
        let k = lay.key.forward(&f, p);
        let v = lay.value.forward(&f, p);
        let scale = 1.0 / (d as f64).sqrt();
        let mut s = matmul_nt(&q, &k.data, k.rows);
        s.data.iter_mut().for_each(|x| *x *= scale);
        let attn = softmax_rows(&s);
        let z = q.add(&matmul_nn(&attn, &v.data, d));
        let (t, ln) = lay.enc_ln.forward(&z, p);
        let cache = EncCache { x: x.clone(), h1, a1, h2, f, g, q, k, v, attn, ln };
        (t, EncOut { cache, pool_argmax })
    }

    fn decode_impl(&self, t: &Mat) -> (Vec<Vec3>, MlpCache) {
        let (out, c) = mlp_forward(&self.layout.dec, t, &self.params);
        let j = self.config.j;
        let mut pts = Vec::with_capacity(t.rows * j);
        for u in 0..t.rows {
            let o = out.row(u);
            for jj in 0..j {
                let b = 3 + 3 * jj;
                pts.push(Vec3::new(o[0] + o[b], o[1] + o[b + 1], o[2] + o[b + 2]));
            }
        }
        (pts, c)
    }

    fn block_impl(&self, l: usize, r: &Mat, mem: &Mat, kv: (Mat, Mat), temperature: f64) -> (Mat, BlockCache) {
        let (p, b) = (&self.params, &self.layout.blocks[l]);
        let (n1, ln1) = b.ln1.forward(r, p);
        let (c, cross) = b.cross.forward_kv(&n1, mem, kv.0, kv.1, p, temperature);
        let x1 = r.add(&c);
        let (n2, ln2) = b.ln2.forward(&x1, p);
        let (s, selfa) = b.selfa.forward(&n2, &n2, p, temperature);
        let x2 = x1.add(&s);
        let (n3, ln3) = b.ln3.forward(&x2, p);
        let (f, ff) = mlp_forward(&b.ff, &n3, p);
        (x2.add(&f), BlockCache { ln1, cross, ln2, selfa, ln3, ff })
    }

    fn heads_impl(&self, r: &Mat, t: &Mat, patch_embed: Option<&Mat>) -> HeadOut {
        let (p, lay) = (&self.params, &self.layout);
        let (rf, final_ln) = lay.final_ln.forward(r, p);
        let (logits, sem) = mlp_forward(&lay.sem, &rf, p);
        let probs = softmax_rows(&logits);
        let (a, memr) = mlp_forward(&lay.memr, &rf, p);
        let (b, memt) = match patch_embed {
            Some(b) => (b.clone(), MlpCache::default()),
            None => mlp_forward(&lay.memt, t, p),
        };
        let mut membership = matmul_nt(&a, &b.data, b.rows);
        let scale = 1.0 / (self.config.d as f64).sqrt();
        membership.data.iter_mut().for_each(|x| *x = sigmoid(*x * scale));
        let (raw, geo) = mlp_forward(&lay.geo, &rf, p);
        let mut theta_raw = Vec::with_capacity(raw.rows);
        let mut theta = Vec::with_capacity(raw.rows);
        let mut norms = Vec::with_capacity(raw.rows);
        let mut signs = Vec::with_capacity(raw.rows);
        for k in 0..raw.rows {
            let mut th: [f64; 10] = raw.row(k).try_into().expect("10 coefficients");
            if self.config.plane_only() {
                QUADRATIC_BLOCK.iter().for_each(|&i| th[i] = 0.0);
            }
            let f = th.iter().zip(FROBENIUS_WEIGHTS).map(|(c, w)| w * c * c).sum::<f64>().sqrt().max(COEFF_ZERO);
            let s = match th.iter().find(|c| c.abs() >= COEFF_ZERO) {
                Some(c) if *c < 0.0 => -1.0,
                _ => 1.0,
            };
            theta.push(th.map(|c| s * c / f));
            theta_raw.push(th);
            norms.push(f);
            signs.push(s);
        }
        debug_assert!((0..probs.rows).all(|k| {
            let s = probs.row(k).iter().sum::<f64>();
            !s.is_finite() || (s - 1.0).abs() < 1e-9
        }));
        HeadOut {
            proxies: rf,
            probs,
            membership,
            theta_raw,
            theta,
            cache: HeadCache { final_ln, sem, memr, memt, a, b, geo, norms, signs },
        }
    }

    /// Exact parameter gradients for upstream loss gradients.
    pub fn backward(&self, out: &ForwardOutput, lg: &LossGrads) -> Result<Vec<f64>> {
        let c = out.cache.as_ref().ok_or(NetworkError::CacheMissing)?;
        let (p, lay, cfg) = (&self.params, &self.layout, &self.config);
        let (kk, uu, d) = (cfg.k, cfg.u, cfg.d);
        let mut g = vec![0.0; lay.total];
        let hc = &c.heads;

        let dprobs = Mat::from_vec(kk, cfg.type_count, lg.probs.clone());
        let dlogits = softmax_rows_backward(&out.probs, &dprobs);
        let mut drf = mlp_backward(&lay.sem, &hc.sem, &dlogits, p, &mut g);

        let scale = 1.0 / (d as f64).sqrt();
        let mut dlin = Mat::zeros(kk, uu);
        for (i, v) in dlin.data.iter_mut().enumerate() {
            let m = out.membership.data[i];
            *v = lg.membership[i] * m * (1.0 - m) * scale;
        }
        let da = matmul_nn(&dlin, &hc.b.data, d);
        let mut db = Mat::zeros(uu, d);
        matmul_tn_acc(&dlin, &hc.a, &mut db.data);
        drf.add_assign(&mlp_backward(&lay.memr, &hc.memr, &da, p, &mut g));
        let mut dt = mlp_backward(&lay.memt, &hc.memt, &db, p, &mut g);

        let mut draw = Mat::zeros(kk, 10);
        for k in 0..kk {
            let th = &out.theta[k];
            let gk = &lg.theta[k];
            let dotp: f64 = gk.iter().zip(th).map(|(a, b)| a * b).sum();
            let row = draw.row_mut(k);
            for i in 0..10 {
                row[i] = hc.signs[k] * (gk[i] - FROBENIUS_WEIGHTS[i] * th[i] * dotp) / hc.norms[k];
            }
            if cfg.plane_only() {
                QUADRATIC_BLOCK.iter().for_each(|&i| row[i] = 0.0);
            }
        }
        drf.add_assign(&mlp_backward(&lay.geo, &hc.geo, &draw, p, &mut g));

        let mut dr = lay.final_ln.backward(&hc.final_ln, &drf, p, &mut g);
        let mut dmem = Mat::zeros(uu, d);
        for l in (0..cfg.layers).rev() {
            let (b, bc) = (&lay.blocks[l], &c.blocks[l]);
            let dn3 = mlp_backward(&b.ff, &bc.ff, &dr, p, &mut g);
            dr.add_assign(&b.ln3.backward(&bc.ln3, &dn3, p, &mut g));
            let (dq, dkv) = b.selfa.backward(&bc.selfa, &dr, p, &mut g);
            let dn2 = dq.add(&dkv);
            dr.add_assign(&b.ln2.backward(&bc.ln2, &dn2, p, &mut g));
            let (dn1, dm) = b.cross.backward(&bc.cross, &dr, p, &mut g);
            dmem.add_assign(&dm);
            dr.add_assign(&b.ln1.backward(&bc.ln1, &dn1, p, &mut g));
        }
        for (a, v) in g[lay.proxies..lay.proxies + kk * d].iter_mut().zip(&dr.data) {
            *a += v;
        }
        dt.add_assign(&mlp_backward(&lay.mem, &c.mem, &dmem, p, &mut g));

        let j = cfg.j;
        let mut dout = Mat::zeros(uu, 3 + 3 * j);
        for u in 0..uu {
            let row = dout.row_mut(u);
            for jj in 0..j {
                let gp = lg.points[u * j + jj];
                let b = 3 + 3 * jj;
                for a in 0..3 {
                    row[a] += gp[a];
                    row[b + a] = gp[a];
                }
            }
        }
        dt.add_assign(&mlp_backward(&lay.dec, &c.dec, &dout, p, &mut g));

        self.encoder_backward(&c.enc, &out.pool_argmax, &dt, &mut g);
        Ok(g)
    }

    fn encoder_backward(&self, c: &EncCache, argmax: &[usize], dt: &Mat, g: &mut [f64]) {
        let (p, lay, d) = (&self.params, &self.layout, self.config.d);
        let dz = lay.enc_ln.backward(&c.ln, dt, p, g);
        let mut dq = dz.clone();
        let dattn = matmul_nt(&dz, &c.v.data, c.v.rows);
        let mut dv = Mat::zeros(c.v.rows, d);
        matmul_tn_acc(&c.attn, &dz, &mut dv.data);
        let mut ds = softmax_rows_backward(&c.attn, &dattn);
        let scale = 1.0 / (d as f64).sqrt();
        ds.data.iter_mut().for_each(|x| *x *= scale);
        dq.add_assign(&matmul_nn(&ds, &c.k.data, d));
        let mut dk = Mat::zeros(c.k.rows, d);
        matmul_tn_acc(&ds, &c.q, &mut dk.data);
        let mut df = lay.key.backward(&c.f, &dk, p, g);
        df.add_assign(&lay.value.backward(&c.f, &dv, p, g));
        let mut dgl = Mat::zeros(1, d);
        for r in 0..dq.rows {
            for (a, v) in dgl.data.iter_mut().zip(dq.row(r)) {
                *a += v;
            }
        }
        for (a, v) in g[lay.queries..lay.queries + dq.data.len()].iter_mut().zip(&dq.data) {
            *a += v;
        }
        let dg = lay.glob.backward(&c.g, &dgl, p, g);
        for (col, &r) in argmax.iter().enumerate() {
            df.data[r * d + col] += dg.data[col];
        }
        let dh2 = gelu_backward(&c.h2, &df);
        let da1 = lay.enc2.backward(&c.a1, &dh2, p, g);
        let dh1 = gelu_backward(&c.h1, &da1);
        lay.enc1.backward(&c.x, &dh1, p, g);
    }
}

struct EncOut {
    cache: EncCache,
    pool_argmax: Vec<usize>,
}

struct HeadOut {
    proxies: Mat,
    probs: Mat,
    membership: Mat,
    theta_raw: Vec<[f64; 10]>,
    theta: Vec<[f64; 10]>,
    cache: HeadCache,
}

/// Logistic function kept strictly inside (0, 1).
fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn out_dim(layout: &Layout, weight_start: usize) -> usize {
    let mut lins = vec![layout.enc1, layout.enc2, layout.glob, layout.key, layout.value];
    for m in [layout.dec, layout.mem, layout.sem, layout.memr, layout.memt, layout.geo] {
        lins.extend([m.a, m.b]);
    }
    for b in &layout.blocks {
        lins.extend([b.cross.q, b.cross.k, b.cross.v, b.cross.o, b.selfa.q, b.selfa.k, b.selfa.v, b.selfa.o, b.ff.a, b.ff.b]);
    }
    lins.iter().find(|l| l.w == weight_start).map(|l| l.out).expect("weight group belongs to a linear layer")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))).collect()
    }

    #[test]
    fn output_shapes_and_ranges() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let out = m.forward(&cloud(64, 1), &ForwardOptions::default());
        assert_eq!((out.features.rows, out.features.cols), (32, 32));
        assert_eq!(out.points.len(), 512);
        assert_eq!((out.proxies.rows, out.proxies.cols), (8, 32));
        assert_eq!((out.probs.rows, out.probs.cols), (8, 5));
        assert_eq!((out.membership.rows, out.membership.cols), (8, 32));
        for k in 0..8 {
            assert!((out.probs.row(k).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(out.membership.data.iter().all(|&m| m > 0.0 && m < 1.0));
        assert!(out.points.iter().all(|p| p.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn encode_ignores_point_order() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let pts = cloud(2048, 2);
        let mut rev = pts.clone();
        rev.reverse();
        let (a, b) = (m.encode(&pts), m.encode(&rev));
        assert_eq!((a.rows, a.cols), (32, 32));
        let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn zero_input_is_finite() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let out = m.infer(&vec![Vec3::zeros(); 32]);
        assert!(out.features.is_finite() && out.probs.is_finite() && out.membership.is_finite());
        assert!(out.theta.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn patch_depends_only_on_its_feature() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let t = m.encode(&cloud(64, 3));
        let mut z = t.clone();
        for u in 1..z.rows {
            z.row_mut(u).fill(0.0);
        }
        let (a, b) = (m.decode_points(&t), m.decode_points(&z));
        assert_eq!(&a[..16], &b[..16]);
    }

    #[test]
    fn uniform_attention_sends_one_message() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let t = m.encode(&cloud(64, 4));
        let msg = m.cross_messages(&t, 1e300);
        for k in 1..msg.rows {
            for (a, b) in msg.row(0).iter().zip(msg.row(k)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let r = m.contextualize(&t, 1.0);
        assert_eq!((r.rows, r.cols), (8, 32));
    }

    #[test]
    fn contextualize_ignores_feature_order() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let t = m.encode(&cloud(64, 5));
        let mut rev = Mat::zeros(t.rows, t.cols);
        for u in 0..t.rows {
            rev.row_mut(u).copy_from_slice(t.row(t.rows - 1 - u));
        }
        let (a, b) = (m.contextualize(&t, 1.0), m.contextualize(&rev, 1.0));
        let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn plane_only_zeroes_quadratic_block() {
        let cfg = ModelConfig { type_count: 2, ..ModelConfig::default() };
        let m = Model::new(cfg).unwrap();
        let out = m.infer(&cloud(64, 6));
        assert_eq!(out.probs.cols, 2);
        for th in &out.theta {
            assert!(QUADRATIC_BLOCK.iter().all(|&i| th[i] == 0.0));
        }
    }

    #[test]
    fn inlier_threshold_is_inclusive() {
        assert_eq!(inlier_sets(&[0.9, 0.4, 0.5]), vec![0, 2]);
        assert!(inlier_sets(&[0.1, 0.49]).is_empty());
    }

    #[test]
    fn backward_needs_cache() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let out = m.infer(&cloud(32, 7));
        let lg = LossGrads { probs: vec![], membership: vec![], theta: vec![], points: vec![] };
        assert!(matches!(m.backward(&out, &lg), Err(NetworkError::CacheMissing)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let out = m.forward(&cloud(32, 8), &ForwardOptions::default());
        let lg = LossGrads {
            probs: vec![0.0; 8 * 5],
            membership: vec![0.0; 8 * 32],
            theta: vec![[0.0; 10]; 8],
            points: vec![Vec3::zeros(); 512],
        };
        assert!(m.backward(&out, &lg).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn staged_forward_matches_full_pass() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let out = m.forward(&cloud(48, 9), &ForwardOptions::default());
        for s in [Stage::Encoder, Stage::Decoder, Stage::Memory, Stage::CrossKv(1), Stage::Block(0), Stage::Block(1), Stage::PatchEmbed, Stage::Heads] {
            let o = m.forward_from(&out, s, &ForwardOptions::default());
            assert_eq!(o.points, out.points);
            assert_eq!(o.probs, out.probs);
            assert_eq!(o.membership, out.membership);
            assert_eq!(o.theta, out.theta);
        }
    }

    #[test]
    fn groups_tile_the_parameter_vector() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let mut next = 0;
        for g in m.groups() {
            assert_eq!(g.start, next);
            next += g.len;
        }
        assert_eq!(next, m.param_count());
    }
}
