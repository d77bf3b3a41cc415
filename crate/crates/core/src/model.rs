//! The two-branch patch transformer: an RGB branch and a segmentation branch
//! whose CLS tokens are fused after every encoder block, an attentive fusion of
//! the final CLS pair, and four classifier heads over the shared trunk.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use translocator_tensor::{Tape, Tensor, Var};

use crate::synth::Sample;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TLOCKP1\0";
pub const LN_EPS: f64 = 1e-6;

/// Head order used everywhere: coarse, middle, fine, scene.
pub const HEADS: [&str; 4] = ["coarse", "middle", "fine", "scene"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    RgbOnly,
    Dual,
}

impl fmt::Display for Branches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branches::RgbOnly => "rgb-only",
            Branches::Dual => "dual",
        })
    }
}

impl FromStr for Branches {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rgb-only" => Ok(Branches::RgbOnly),
            "dual" => Ok(Branches::Dual),
            _ => Err(format!("expected rgb-only or dual, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegEncoding {
    /// Learned per-class vector, laid out per pixel and projected per patch.
    Embed,
    OneHot,
}

impl fmt::Display for SegEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegEncoding::Embed => "embed",
            SegEncoding::OneHot => "onehot",
        })
    }
}

impl FromStr for SegEncoding {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "embed" => Ok(SegEncoding::Embed),
            "onehot" => Ok(SegEncoding::OneHot),
            _ => Err(format!("expected embed or onehot, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub branches: Branches,
    pub mff: bool,
    pub attentive_fusion: bool,
    pub seg_encoding: SegEncoding,
    pub seg_embed_dim: usize,
    pub n_seg_classes: usize,
    pub scorer_hidden: usize,
    pub middle_hidden: usize,
    pub fine_hidden: usize,
    /// Class counts in [`HEADS`] order.
    pub classes: [usize; 4],
    pub init_std: f64,
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub(crate) fn parse_on_off(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patches per image.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens per image including CLS.
    pub fn seq_len(&self) -> usize {
        1 + self.n_patches()
    }

    pub fn is_dual(&self) -> bool {
        self.branches == Branches::Dual
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(format!("model: {m}")));
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return fail("image_size must be a positive multiple of patch_size");
        }
        if self.embed_dim < 2 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail("embed_dim must be at least 2 and divisible by heads");
        }
        if self.depth == 0 || self.ffn_dim == 0 {
            return fail("depth and ffn_dim must be positive");
        }
        if self.scorer_hidden == 0 || self.middle_hidden == 0 || self.fine_hidden == 0 {
            return fail("hidden sizes must be positive");
        }
        if self.classes.contains(&0) {
            return fail("every head needs at least one class");
        }
        if self.mff && !self.is_dual() {
            return fail("mff requires dual branches");
        }
        if self.attentive_fusion && !self.is_dual() {
            return fail("attentive fusion requires dual branches");
        }
        if self.is_dual() {
            if !(1..=256).contains(&self.n_seg_classes) {
                return fail("n_seg_classes must be in 1..=256");
            }
            if self.seg_encoding == SegEncoding::Embed && self.seg_embed_dim == 0 {
                return fail("seg_embed_dim must be positive");
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail("init_std must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let c = &self.classes;
        format!(
            "image_size={}\npatch_size={}\nembed_dim={}\ndepth={}\nheads={}\nffn_dim={}\nbranches={}\nmff={}\n\
             attentive_fusion={}\nseg_encoding={}\nseg_embed_dim={}\nn_seg_classes={}\nscorer_hidden={}\n\
             middle_hidden={}\nfine_hidden={}\nclasses={},{},{},{}\ninit_std={}\n",
            self.image_size,
            self.patch_size,
            self.embed_dim,
            self.depth,
            self.heads,
            self.ffn_dim,
            self.branches,
            on_off(self.mff),
            on_off(self.attentive_fusion),
            self.seg_encoding,
            self.seg_embed_dim,
            self.n_seg_classes,
            self.scorer_hidden,
            self.middle_hidden,
            self.fine_hidden,
            c[0],
            c[1],
            c[2],
            c[3],
            self.init_std
        )
    }

    pub fn from_kv(text: &str) -> std::result::Result<Self, String> {
        let mut map: HashMap<&str, &str> = HashMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("bad line {line:?}"))?;
            if map.insert(k, v).is_some() {
                return Err(format!("duplicate key {k}"));
            }
        }
        let mut get = |k: &str| map.remove(k).ok_or_else(|| format!("missing key {k}"));
        fn num<T: FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value for {k}: {v:?}"))
        }
        let classes: Vec<usize> = get("classes")?
            .split(',')
            .map(|v| num("classes", v))
            .collect::<std::result::Result<_, _>>()?;
        let classes: [usize; 4] = classes
            .try_into()
            .map_err(|_| "classes needs 4 values".to_string())?;
        let cfg = ModelConfig {
            image_size: num("image_size", get("image_size")?)?,
            patch_size: num("patch_size", get("patch_size")?)?,
            embed_dim: num("embed_dim", get("embed_dim")?)?,
            depth: num("depth", get("depth")?)?,
            heads: num("heads", get("heads")?)?,
            ffn_dim: num("ffn_dim", get("ffn_dim")?)?,
            branches: get("branches")?.parse()?,
            mff: parse_on_off(get("mff")?)?,
            attentive_fusion: parse_on_off(get("attentive_fusion")?)?,
            seg_encoding: get("seg_encoding")?.parse()?,
            seg_embed_dim: num("seg_embed_dim", get("seg_embed_dim")?)?,
            n_seg_classes: num("n_seg_classes", get("n_seg_classes")?)?,
            scorer_hidden: num("scorer_hidden", get("scorer_hidden")?)?,
            middle_hidden: num("middle_hidden", get("middle_hidden")?)?,
            fine_hidden: num("fine_hidden", get("fine_hidden")?)?,
            classes,
            init_std: num("init_std", get("init_std")?)?,
        };
        if let Some(k) = map.keys().next() {
            return Err(format!("unknown key {k}"));
        }
        Ok(cfg)
    }
}

/// Named parameter tensors in a fixed registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Registers parameters; without an rng every Gaussian tensor is left at zero
/// (used to recover the layout when loading).
struct Init<'r> {
    rng: Option<&'r mut dyn RngCore>,
    normal: Normal<f64>,
    params: Params,
}

impl Init<'_> {
    fn draw(&mut self, n: usize, scale: f64) -> Vec<f64> {
        match self.rng.as_deref_mut() {
            Some(rng) => (0..n).map(|_| self.normal.sample(rng) * scale).collect(),
            None => vec![0.0; n],
        }
    }

    fn gauss(&mut self, name: String, shape: &[usize]) {
        let data = self.draw(shape.iter().product(), 1.0);
        self.params.push(
            name,
            Tensor::new(shape.to_vec(), data).expect("shape matches"),
        );
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.params.push(name, Tensor::zeros(shape));
    }

    fn ones(&mut self, name: String, shape: &[usize]) {
        self.params.push(name, Tensor::filled(shape, 1.0));
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) {
        self.gauss(format!("{prefix}.w"), &[input, output]);
        self.zeros(format!("{prefix}.b"), &[output]);
    }

    fn identity(&mut self, prefix: &str, dim: usize) {
        self.params.push(format!("{prefix}.w"), Tensor::eye(dim));
        self.zeros(format!("{prefix}.b"), &[dim]);
    }

    fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.ones(format!("{prefix}.g"), &[dim]);
        self.zeros(format!("{prefix}.b"), &[dim]);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

fn branch_names(cfg: &ModelConfig) -> &'static [&'static str] {
    if cfg.is_dual() {
        &["rgb", "seg"]
    } else {
        &["rgb"]
    }
}

impl Model {
    /// Gaussian initialisation with `init_std`; layer norms at (1, 0), MFF maps at identity.
    pub fn new<R: RngCore>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    fn build(config: ModelConfig, rng: Option<&mut dyn RngCore>) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let p2 = config.patch_size * config.patch_size;
        let mut init = Init {
            rng,
            normal: Normal::new(0.0, config.init_std).expect("validated std"),
            params: Params::new(),
        };
        for &br in branch_names(&config) {
            let in_dim = if br == "rgb" {
                3 * p2
            } else {
                match config.seg_encoding {
                    SegEncoding::Embed => {
                        // unit scale, like the one-hot alternative
                        let n = config.n_seg_classes * config.seg_embed_dim;
                        let data = init.draw(n, 1.0 / config.init_std);
                        let t = Tensor::new(vec![config.n_seg_classes, config.seg_embed_dim], data)
                            .unwrap();
                        init.params.push("seg.embed".into(), t);
                        config.seg_embed_dim * p2
                    }
                    SegEncoding::OneHot => config.n_seg_classes * p2,
                }
            };
            init.linear(&format!("{br}.patch"), in_dim, c);
            init.gauss(format!("{br}.cls"), &[1, c]);
            init.gauss(format!("{br}.pos"), &[config.seq_len(), c]);
            for k in 0..config.depth {
                let b = format!("{br}.block{k}");
                init.layer_norm(&format!("{b}.ln1"), c);
                init.linear(&format!("{b}.qkv"), c, 3 * c);
                init.linear(&format!("{b}.proj"), c, c);
                init.layer_norm(&format!("{b}.ln2"), c);
                init.linear(&format!("{b}.fc1"), c, config.ffn_dim);
                init.linear(&format!("{b}.fc2"), config.ffn_dim, c);
            }
            init.layer_norm(&format!("{br}.norm"), c);
        }
        if config.mff {
            for k in 0..config.depth {
                init.identity(&format!("mff{k}.f"), c);
                init.identity(&format!("mff{k}.g"), c);
            }
        }
        if config.attentive_fusion {
            init.linear("fusion.fc1", c, config.scorer_hidden);
            init.linear("fusion.fc2", config.scorer_hidden, 1);
        }
        let [kc, km, kf, ks] = config.classes;
        init.linear("head.coarse", 2 * c, kc);
        init.linear("head.middle.fc1", 2 * c, config.middle_hidden);
        init.linear("head.middle.fc2", config.middle_hidden, km);
        init.linear("head.fine.fc1", 2 * c, config.fine_hidden);
        init.linear("head.fine.fc2", config.fine_hidden, kf);
        init.linear("head.scene", 2 * c, ks);
        Ok(Model {
            config,
            params: init.params,
        })
    }

    /// Binds every parameter as a trainable leaf, in registration order.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound<'a> {
        Bound {
            vars: self.params.tensors.iter().map(|t| tape.param(t)).collect(),
            index: &self.params.index,
        }
    }

    /// Forward pass over a batch. Attention probabilities stay on the tape.
    pub fn forward(&self, tape: &mut Tape<'_>, bound: &Bound, batch: &Batch) -> Result<Forward> {
        let cfg = &self.config;
        let n = batch.len;
        if batch.rgb.len() != n * 3 * cfg.image_size * cfg.image_size {
            return Err(Error::Validation(format!(
                "rgb batch has {} values, expected {} images of 3×{}×{}",
                batch.rgb.len(),
                n,
                cfg.image_size,
                cfg.image_size
            )));
        }
        if cfg.is_dual() != batch.seg.is_some() {
            return Err(Error::Validation(if cfg.is_dual() {
                "dual-branch model needs a segmentation input".into()
            } else {
                "rgb-only model does not accept a segmentation input".into()
            }));
        }
        let seq = cfg.seq_len();
        let mut states = Vec::new();
        let rgb_in = tape.constant(rgb_patches(cfg, &batch.rgb, n));
        states.push(self.embed_tokens(tape, bound, "rgb", rgb_in, n)?);
        if let Some(seg) = &batch.seg {
            if seg.len() != n * cfg.image_size * cfg.image_size {
                return Err(Error::Validation(
                    "segmentation batch has the wrong size".into(),
                ));
            }
            if seg.iter().any(|&c| usize::from(c) >= cfg.n_seg_classes) {
                return Err(Error::Validation(
                    "segmentation class out of range for the model".into(),
                ));
            }
            let seg_in = match cfg.seg_encoding {
                SegEncoding::Embed => {
                    let (index, shape) = seg_embed_index(cfg, seg, n);
                    tape.gather(bound.get("seg.embed"), index, shape)?
                }
                SegEncoding::OneHot => tape.constant(seg_onehot_patches(cfg, seg, n)),
            };
            states.push(self.embed_tokens(tape, bound, "seg", seg_in, n)?);
        }

        let names = branch_names(cfg);
        let mut attention = vec![Vec::with_capacity(cfg.depth); names.len()];
        for k in 0..cfg.depth {
            for (b, br) in names.iter().enumerate() {
                let p = BlockVars::bind(bound, &format!("{br}.block{k}"));
                let (x, probs) = encoder_block(tape, states[b], &p, n, cfg.heads)?;
                states[b] = x;
                attention[b].push(probs);
            }
            if cfg.mff {
                let f = Affine::bind(bound, &format!("mff{k}.f"));
                let g = Affine::bind(bound, &format!("mff{k}.g"));
                let [a, b] = mff_exchange(tape, [states[0], states[1]], n, seq, f, g)?;
                states[0] = a;
                states[1] = b;
            }
        }

        let cls_rows: Vec<usize> = (0..n).map(|i| i * seq).collect();
        let mut cls = Vec::with_capacity(names.len());
        for (b, br) in names.iter().enumerate() {
            let c = tape.gather_rows(states[b], &cls_rows)?;
            let (g, bias) = (
                bound.get(&format!("{br}.norm.g")),
                bound.get(&format!("{br}.norm.b")),
            );
            cls.push(tape.layer_norm(c, g, bias, LN_EPS)?);
        }
        let (fused, weights) = match (cfg.is_dual(), cfg.attentive_fusion) {
            (false, _) => (tape.concat_cols(&[cls[0], cls[0]])?, None),
            (true, false) => (tape.concat_cols(&[cls[0], cls[1]])?, None),
            (true, true) => {
                let scorer = Scorer {
                    fc1: Affine::bind(bound, "fusion.fc1"),
                    fc2: Affine::bind(bound, "fusion.fc2"),
                };
                let (f, w) = attentive_fuse(tape, cls[0], cls[1], &scorer)?;
                (f, Some(w))
            }
        };

        let coarse = Affine::bind(bound, "head.coarse").apply(tape, fused)?;
        let middle = mlp(tape, bound, "head.middle", fused)?;
        let fine = mlp(tape, bound, "head.fine", fused)?;
        let scene = Affine::bind(bound, "head.scene").apply(tape, fused)?;
        Ok(Forward {
            logits: [coarse, middle, fine, scene],
            weights,
            cls,
            fused,
            attention,
        })
    }

    /// Patch projection, CLS prepended per sample, positional rows added.
    /// `patches` is `[n·N × d]`; the result is `[n·(1+N) × C]`.
    pub fn embed_tokens(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        br: &str,
        patches: Var,
        n: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let proj = Affine::bind(bound, &format!("{br}.patch")).apply(tape, patches)?;
        let cls = bound.get(&format!("{br}.cls"));
        let joined = tape.concat_rows(&[cls, proj])?;
        let np = cfg.n_patches();
        let order: Vec<usize> = (0..n)
            .flat_map(|i| std::iter::once(0).chain((0..np).map(move |p| 1 + i * np + p)))
            .collect();
        let tokens = tape.gather_rows(joined, &order)?;
        Ok(tape.add_rows(tokens, bound.get(&format!("{br}.pos")))?)
    }

    /// Convenience: runs a forward pass and returns plain logits per head.
    pub fn predict_logits(&self, batch: &Batch) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let fw = self.forward(&mut tape, &bound, batch)?;
        let logits = fw.logits.map(|v| tape.value(v).to_vec());
        let weights = fw.weights.map(|w| tape.value(w).to_vec());
        Ok(Prediction {
            n: batch.len,
            classes: self.config.classes,
            logits,
            weights,
        })
    }

    /// Attention maps of every sample in the batch.
    pub fn attention(&self, batch: &Batch) -> Result<Vec<AttentionMaps>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let fw = self.forward(&mut tape, &bound, batch)?;
        (0..batch.len)
            .map(|i| fw.attention_maps(&tape, i))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let kv = self.config.to_kv();
        out.extend_from_slice(&(kv.len() as u32).to_le_bytes());
        out.extend_from_slice(kv.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in &self.params.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. The parameter manifest must match the layout the
    /// stored config implies exactly.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |m: String| Error::format(origin, m);
        if bytes.get(..8) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let mut r = ByteCursor { bytes, pos: 8 };
        let kv_len = r
            .u32()
            .ok_or_else(|| bad("truncated config block".into()))?;
        let kv = r
            .take(kv_len)
            .ok_or_else(|| bad("truncated config block".into()))?;
        let kv = std::str::from_utf8(kv).map_err(|_| bad("config block is not UTF-8".into()))?;
        let config = ModelConfig::from_kv(kv).map_err(|e| bad(format!("config block: {e}")))?;
        config.validate().map_err(|e| bad(e.to_string()))?;
        let layout = Model::build(config.clone(), None)?;

        let count = r.u32().ok_or_else(|| bad("truncated manifest".into()))?;
        if count != layout.params.len() {
            return Err(bad(format!(
                "manifest has {count} tensors, config implies {}",
                layout.params.len()
            )));
        }
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32().ok_or_else(|| bad("truncated manifest".into()))?;
            let name = r
                .take(len)
                .ok_or_else(|| bad("truncated manifest".into()))?;
            let name = std::str::from_utf8(name)
                .map_err(|_| bad("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32().ok_or_else(|| bad("truncated manifest".into()))?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(|| bad("truncated manifest".into()))?);
            }
            manifest.push((name, shape));
        }
        let mut params = Params::new();
        for ((name, shape), (want_name, want)) in manifest
            .into_iter()
            .zip(layout.params.names.iter().zip(&layout.params.tensors))
        {
            if &name != want_name || shape != want.shape() {
                return Err(bad(format!(
                    "tensor {name} {shape:?} does not match expected {want_name} {:?}",
                    want.shape()
                )));
            }
            let n: usize = shape.iter().product();
            let raw = r
                .take(8 * n)
                .ok_or_else(|| bad("truncated tensor payload".into()))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("tensor {name} holds non-finite values")));
            }
            params.push(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after tensor payloads".into()));
        }
        Ok(Model { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct ByteCursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> ByteCursor<'b> {
    fn take(&mut self, n: usize) -> Option<&'b [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

/// Parameters bound to a tape, addressable by name.
pub struct Bound<'m> {
    pub vars: Vec<Var>,
    index: &'m HashMap<String, usize>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))]
    }
}

/// Plain per-head logits of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub n: usize,
    pub classes: [usize; 4],
    /// Row-major `[n × K]` per head.
    pub logits: [Vec<f64>; 4],
    /// `[n × 2]` fusion weights (rgb, seg) when attentive fusion is on.
    pub weights: Option<Vec<f64>>,
}

impl Prediction {
    pub fn row(&self, head: usize, i: usize) -> &[f64] {
        let k = self.classes[head];
        &self.logits[head][i * k..(i + 1) * k]
    }

    pub fn argmax(&self, head: usize, i: usize) -> usize {
        argmax(self.row(head, i))
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Handles of one forward pass.
pub struct Forward {
    /// Logits in [`HEADS`] order, each `[n × K]`.
    pub logits: [Var; 4],
    /// Softmaxed branch scores `[n × 2]` (rgb, seg) when attentive fusion is on.
    pub weights: Option<Var>,
    /// Final normalised CLS per branch, `[n × C]`.
    pub cls: Vec<Var>,
    /// Fused representation `[n × 2C]` fed to the heads.
    pub fused: Var,
    /// Attention outputs per branch per layer; probabilities via [`Tape::attention_probs`].
    pub attention: Vec<Vec<Var>>,
}

/// Per-layer attention maps of one sample: `[branch][layer][head]`, each `seq × seq`.
pub type AttentionMaps = Vec<Vec<Vec<Vec<f64>>>>;

impl Forward {
    pub fn attention_maps(&self, tape: &Tape<'_>, sample: usize) -> Result<AttentionMaps> {
        self.attention
            .iter()
            .map(|layers| {
                layers
                    .iter()
                    .map(|&v| {
                        let p = tape.attention_probs(v).ok_or_else(|| {
                            Error::Validation("attention was not recorded".into())
                        })?;
                        if sample >= p.batch {
                            return Err(Error::Validation(format!(
                                "sample {sample} not in batch of {}",
                                p.batch
                            )));
                        }
                        Ok((0..p.heads).map(|h| p.map(sample, h).to_vec()).collect())
                    })
                    .collect()
            })
            .collect()
    }
}

/// `x·w + b`.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: Var,
    pub b: Var,
}

impl Affine {
    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        Affine {
            w: bound.get(&format!("{prefix}.w")),
            b: bound.get(&format!("{prefix}.b")),
        }
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        Ok(tape.add_rows(y, self.b)?)
    }
}

fn mlp(tape: &mut Tape<'_>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = Affine::bind(bound, &format!("{prefix}.fc1")).apply(tape, x)?;
    let h = tape.gelu(h);
    Affine::bind(bound, &format!("{prefix}.fc2")).apply(tape, h)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub g: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1: LayerNormVars,
    pub qkv: Affine,
    pub proj: Affine,
    pub ln2: LayerNormVars,
    pub fc1: Affine,
    pub fc2: Affine,
}

impl BlockVars {
    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        let ln = |n: &str| LayerNormVars {
            g: bound.get(&format!("{prefix}.{n}.g")),
            b: bound.get(&format!("{prefix}.{n}.b")),
        };
        let aff = |n: &str| Affine::bind(bound, &format!("{prefix}.{n}"));
        BlockVars {
            ln1: ln("ln1"),
            qkv: aff("qkv"),
            proj: aff("proj"),
            ln2: ln("ln2"),
            fc1: aff("fc1"),
            fc2: aff("fc2"),
        }
    }
}

/// Pre-norm encoder block over `batch` stacked sequences:
/// `y = x + MSA(LN(x))`, `out = y + MLP(LN(y))`.
/// Returns the output and the attention node (for its probabilities).
pub fn encoder_block(
    tape: &mut Tape<'_>,
    x: Var,
    p: &BlockVars,
    batch: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let c = tape.shape(x)[1];
    let h = tape.layer_norm(x, p.ln1.g, p.ln1.b, LN_EPS)?;
    let qkv = p.qkv.apply(tape, h)?;
    let q = tape.slice_cols(qkv, 0, c)?;
    let k = tape.slice_cols(qkv, c, c)?;
    let v = tape.slice_cols(qkv, 2 * c, c)?;
    let attn = tape.attention(q, k, v, batch, heads)?;
    let msa = p.proj.apply(tape, attn)?;
    let y = tape.add(x, msa)?;
    let h = tape.layer_norm(y, p.ln2.g, p.ln2.b, LN_EPS)?;
    let h = p.fc1.apply(tape, h)?;
    let h = tape.gelu(h);
    let h = p.fc2.apply(tape, h)?;
    Ok((tape.add(y, h)?, attn))
}

/// Multi-modal feature fusion: `fused = g(f(cls_a) + f(cls_b))` replaces the
/// CLS token (row 0 of every sequence) of both branches. Patch rows are copied unchanged.
pub fn mff_exchange(
    tape: &mut Tape<'_>,
    states: [Var; 2],
    batch: usize,
    seq: usize,
    f: Affine,
    g: Affine,
) -> Result<[Var; 2]> {
    let rows = tape.shape(states[0])[0];
    if rows != batch * seq || tape.shape(states[1]) != tape.shape(states[0]) {
        return Err(Error::Validation(
            "mff_exchange: branch states do not match".into(),
        ));
    }
    let cls_rows: Vec<usize> = (0..batch).map(|i| i * seq).collect();
    let ca = tape.gather_rows(states[0], &cls_rows)?;
    let cb = tape.gather_rows(states[1], &cls_rows)?;
    let fa = f.apply(tape, ca)?;
    let fb = f.apply(tape, cb)?;
    let sum = tape.add(fa, fb)?;
    let fused = g.apply(tape, sum)?;
    let order: Vec<usize> = (0..rows)
        .map(|r| if r % seq == 0 { rows + r / seq } else { r })
        .collect();
    let mut out = [states[0]; 2];
    for (o, &s) in out.iter_mut().zip(&states) {
        let joined = tape.concat_rows(&[s, fused])?;
        *o = tape.gather_rows(joined, &order)?;
    }
    Ok(out)
}

/// Dense scorer applied to each branch's CLS with shared weights.
#[derive(Clone, Copy, Debug)]
pub struct Scorer {
    pub fc1: Affine,
    pub fc2: Affine,
}

/// Attentive fusion: `w = softmax(score(cls_rgb), score(cls_seg))`,
/// `f_i = (1 + w_i)·cls_i`, output `[f_rgb ‖ f_seg]` and `w` (`[n × 2]`).
pub fn attentive_fuse(
    tape: &mut Tape<'_>,
    cls_rgb: Var,
    cls_seg: Var,
    scorer: &Scorer,
) -> Result<(Var, Var)> {
    let n = tape.shape(cls_rgb)[0];
    let both = tape.concat_rows(&[cls_rgb, cls_seg])?;
    let h = scorer.fc1.apply(tape, both)?;
    let h = tape.gelu(h);
    let s = scorer.fc2.apply(tape, h)?;
    let s_rgb = tape.slice_rows(s, 0, n)?;
    let s_seg = tape.slice_rows(s, n, n)?;
    let scores = tape.concat_cols(&[s_rgb, s_seg])?;
    let w = tape.softmax(scores, 1)?;
    let mut parts = [cls_rgb; 2];
    for (i, (part, cls)) in parts.iter_mut().zip([cls_rgb, cls_seg]).enumerate() {
        let wi = tape.slice_cols(w, i, 1)?;
        let factor = tape.add_scalar(wi, 1.0);
        *part = tape.scale_rows(cls, factor)?;
    }
    Ok((tape.concat_cols(&parts)?, w))
}

/// Model input for `len` images.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub len: usize,
    /// `len × 3 × H × W`.
    pub rgb: Vec<f64>,
    /// `len × H × W` class ids; present iff the model is dual-branch.
    pub seg: Option<Vec<u8>>,
}

impl Batch {
    pub fn from_samples<'s, I>(samples: I, with_seg: bool) -> Self
    where
        I: IntoIterator<Item = &'s Sample>,
    {
        let mut b = Batch {
            len: 0,
            rgb: Vec::new(),
            seg: with_seg.then(Vec::new),
        };
        for s in samples {
            b.len += 1;
            b.rgb.extend(s.rgb.iter().map(|&v| f64::from(v)));
            if let Some(seg) = &mut b.seg {
                seg.extend_from_slice(&s.seg);
            }
        }
        b
    }
}

/// Rows of `[n·N × 3P²]`; columns are channel-major, then row, then column within the patch.
pub fn rgb_patches(cfg: &ModelConfig, rgb: &[f64], n: usize) -> Tensor {
    let (s, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let plane = s * s;
    let width = 3 * p * p;
    let mut out = Vec::with_capacity(n * g * g * width);
    for i in 0..n {
        let img = &rgb[i * 3 * plane..(i + 1) * 3 * plane];
        for py in 0..g {
            for px in 0..g {
                for ch in 0..3 {
                    for dy in 0..p {
                        let start = ch * plane + (py * p + dy) * s + px * p;
                        out.extend_from_slice(&img[start..start + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n * g * g, width], out).expect("patch buffer matches shape")
}

/// Pixel class ids of each patch, row-major within the patch.
fn seg_patch_classes(cfg: &ModelConfig, seg: &[u8], n: usize) -> Vec<u8> {
    let (s, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let mut out = Vec::with_capacity(seg.len());
    for i in 0..n {
        let img = &seg[i * s * s..(i + 1) * s * s];
        for py in 0..g {
            for px in 0..g {
                for dy in 0..p {
                    let start = (py * p + dy) * s + px * p;
                    out.extend_from_slice(&img[start..start + p]);
                }
            }
        }
    }
    out
}

/// Gather indices into the `[classes × E]` embedding table producing
/// `[n·N × E·P²]` rows laid out embedding-channel-major like the RGB patches.
fn seg_embed_index(cfg: &ModelConfig, seg: &[u8], n: usize) -> (Vec<usize>, Vec<usize>) {
    let e = cfg.seg_embed_dim;
    let p2 = cfg.patch_size * cfg.patch_size;
    let classes = seg_patch_classes(cfg, seg, n);
    let mut index = Vec::with_capacity(classes.len() * e);
    for patch in classes.chunks_exact(p2) {
        for ch in 0..e {
            index.extend(patch.iter().map(|&c| usize::from(c) * e + ch));
        }
    }
    let rows = n * cfg.n_patches();
    (index, vec![rows, e * p2])
}

fn seg_onehot_patches(cfg: &ModelConfig, seg: &[u8], n: usize) -> Tensor {
    let k = cfg.n_seg_classes;
    let p2 = cfg.patch_size * cfg.patch_size;
    let classes = seg_patch_classes(cfg, seg, n);
    let mut out = vec![0.0; classes.len() * k];
    for (row, patch) in classes.chunks_exact(p2).enumerate() {
        for (j, &c) in patch.iter().enumerate() {
            out[row * k * p2 + usize::from(c) * p2 + j] = 1.0;
        }
    }
    Tensor::new(vec![n * cfg.n_patches(), k * p2], out).expect("one-hot buffer matches shape")
}
