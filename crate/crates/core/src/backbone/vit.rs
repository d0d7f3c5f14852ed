use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMutD, Axis, Ix2};

use super::layers::{self, GradMask, Grads, LayerNorm, Linear, LinearCache, NormCache};
use super::spec::{Architecture, BackboneHandle, EmbeddingRule};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::seed::{self, Rng};

/// Parameter groups for trainability bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Pretrained backbone weights.
    Base,
    /// Low-rank adapter factors.
    Adapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Real> {
    pub norm1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// The four attention and two MLP projections of a block, by path suffix.
pub(crate) const PROJECTIONS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"];

impl<T: Real> Block<T> {
    pub fn projection(&self, suffix: &str) -> Option<&Linear<T>> {
        Some(match suffix {
            "attn.q" => &self.q,
            "attn.k" => &self.k,
            "attn.v" => &self.v,
            "attn.o" => &self.o,
            "mlp.fc1" => &self.fc1,
            "mlp.fc2" => &self.fc2,
            _ => return None,
        })
    }

    pub fn projection_mut(&mut self, suffix: &str) -> Option<&mut Linear<T>> {
        Some(match suffix {
            "attn.q" => &mut self.q,
            "attn.k" => &mut self.k,
            "attn.v" => &mut self.v,
            "attn.o" => &mut self.o,
            "mlp.fc1" => &mut self.fc1,
            "mlp.fc2" => &mut self.fc2,
            _ => return None,
        })
    }
}

/// Pre-norm vision transformer: linear patch embedding, class and optional
/// register tokens, learned positional embedding, `depth` blocks and a final
/// layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionTransformer<T: Real> {
    spec: BackboneHandle,
    pub patch_embed: Linear<T>,
    pub cls_token: Array1<T>,
    pub register_tokens: Array2<T>,
    /// Rows: class token, then patches. Register tokens carry no position.
    pub pos_embed: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

struct BlockCache<T: Real> {
    n1: NormCache<T>,
    h1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    qc: LinearCache<T>,
    kc: LinearCache<T>,
    vc: LinearCache<T>,
    probs: Vec<Array2<T>>,
    attn: Array2<T>,
    oc: LinearCache<T>,
    n2: NormCache<T>,
    h2: Array2<T>,
    f1: Array2<T>,
    c1: LinearCache<T>,
    g: Array2<T>,
    c2: LinearCache<T>,
}

/// Activations retained by a training forward pass.
pub struct ForwardCache<T: Real> {
    batch: usize,
    patches: Option<Array2<T>>,
    blocks: Vec<BlockCache<T>>,
    final_norm: NormCache<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn visit_linear<T: Real>(l: &Linear<T>, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, ArrayViewD<T>)) {
    f(&format!("{prefix}.weight"), ParamGroup::Base, l.weight.view().into_dyn());
    f(&format!("{prefix}.bias"), ParamGroup::Base, l.bias.view().into_dyn());
    if let Some(a) = &l.adapter {
        f(&format!("{prefix}.lora_a"), ParamGroup::Adapter, a.a.view().into_dyn());
        f(&format!("{prefix}.lora_b"), ParamGroup::Adapter, a.b.view().into_dyn());
    }
}

fn visit_linear_mut<T: Real>(l: &mut Linear<T>, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, ArrayViewMutD<T>)) {
    f(&format!("{prefix}.weight"), ParamGroup::Base, l.weight.view_mut().into_dyn());
    f(&format!("{prefix}.bias"), ParamGroup::Base, l.bias.view_mut().into_dyn());
    if let Some(a) = &mut l.adapter {
        f(&format!("{prefix}.lora_a"), ParamGroup::Adapter, a.a.view_mut().into_dyn());
        f(&format!("{prefix}.lora_b"), ParamGroup::Adapter, a.b.view_mut().into_dyn());
    }
}

fn visit_norm<T: Real>(n: &LayerNorm<T>, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, ArrayViewD<T>)) {
    f(&format!("{prefix}.gamma"), ParamGroup::Base, n.gamma.view().into_dyn());
    f(&format!("{prefix}.beta"), ParamGroup::Base, n.beta.view().into_dyn());
}

fn visit_norm_mut<T: Real>(n: &mut LayerNorm<T>, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, ArrayViewMutD<T>)) {
    f(&format!("{prefix}.gamma"), ParamGroup::Base, n.gamma.view_mut().into_dyn());
    f(&format!("{prefix}.beta"), ParamGroup::Base, n.beta.view_mut().into_dyn());
}

impl<T: Real> VisionTransformer<T> {
    /// Random initialization, fully determined by `seed`.
    pub fn seeded(spec: BackboneHandle, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.architecture != Architecture::VisionTransformer {
            return Err(Error::Unsupported(format!(
                "`{}` is a convolutional backbone; only transformer backbones are executable",
                spec.name
            )));
        }
        let mut rng = seed::rng_from(seed, &["backbone-init", &spec.name]);
        let d = spec.width;
        let p = spec.patch_size();
        let eps = spec.layer_norm_eps;
        let patch_embed = Linear::seeded(&mut rng, d, 3 * p * p);
        // Uniform with the standard deviation of N(0, 0.02).
        let tok_bound = 0.02 * 3f64.sqrt();
        let cls_token = layers::uniform_vector(&mut rng, d, tok_bound);
        let register_tokens = layers::uniform_matrix(&mut rng, spec.register_tokens, d, tok_bound);
        let pos_embed = layers::uniform_matrix(&mut rng, 1 + spec.patch_grid, d, tok_bound);
        let blocks = (0..spec.depth)
            .map(|_| Block {
                norm1: LayerNorm::new(d, eps),
                q: Linear::seeded(&mut rng, d, d),
                k: Linear::seeded(&mut rng, d, d),
                v: Linear::seeded(&mut rng, d, d),
                o: Linear::seeded(&mut rng, d, d),
                norm2: LayerNorm::new(d, eps),
                fc1: Linear::seeded(&mut rng, spec.mlp_dim, d),
                fc2: Linear::seeded(&mut rng, d, spec.mlp_dim),
            })
            .collect();
        Ok(VisionTransformer {
            norm: LayerNorm::new(d, eps),
            spec,
            patch_embed,
            cls_token,
            register_tokens,
            pos_embed,
            blocks,
        })
    }

    pub fn spec(&self) -> &BackboneHandle {
        &self.spec
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, ParamGroup, ArrayViewD<T>)) {
        visit_linear(&self.patch_embed, "patch_embed", f);
        f("cls_token", ParamGroup::Base, self.cls_token.view().into_dyn());
        if self.spec.register_tokens > 0 {
            f("register_tokens", ParamGroup::Base, self.register_tokens.view().into_dyn());
        }
        f("pos_embed", ParamGroup::Base, self.pos_embed.view().into_dyn());
        for (i, b) in self.blocks.iter().enumerate() {
            let pre = format!("blocks.{i}");
            visit_norm(&b.norm1, &format!("{pre}.norm1"), f);
            visit_linear(&b.q, &format!("{pre}.attn.q"), f);
            visit_linear(&b.k, &format!("{pre}.attn.k"), f);
            visit_linear(&b.v, &format!("{pre}.attn.v"), f);
            visit_linear(&b.o, &format!("{pre}.attn.o"), f);
            visit_norm(&b.norm2, &format!("{pre}.norm2"), f);
            visit_linear(&b.fc1, &format!("{pre}.mlp.fc1"), f);
            visit_linear(&b.fc2, &format!("{pre}.mlp.fc2"), f);
        }
        visit_norm(&self.norm, "norm", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamGroup, ArrayViewMutD<T>)) {
        visit_linear_mut(&mut self.patch_embed, "patch_embed", f);
        f("cls_token", ParamGroup::Base, self.cls_token.view_mut().into_dyn());
        if self.spec.register_tokens > 0 {
            f("register_tokens", ParamGroup::Base, self.register_tokens.view_mut().into_dyn());
        }
        f("pos_embed", ParamGroup::Base, self.pos_embed.view_mut().into_dyn());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let pre = format!("blocks.{i}");
            visit_norm_mut(&mut b.norm1, &format!("{pre}.norm1"), f);
            visit_linear_mut(&mut b.q, &format!("{pre}.attn.q"), f);
            visit_linear_mut(&mut b.k, &format!("{pre}.attn.k"), f);
            visit_linear_mut(&mut b.v, &format!("{pre}.attn.v"), f);
            visit_linear_mut(&mut b.o, &format!("{pre}.attn.o"), f);
            visit_norm_mut(&mut b.norm2, &format!("{pre}.norm2"), f);
            visit_linear_mut(&mut b.fc1, &format!("{pre}.mlp.fc1"), f);
            visit_linear_mut(&mut b.fc2, &format!("{pre}.mlp.fc2"), f);
        }
        visit_norm_mut(&mut self.norm, "norm", f);
    }

    /// SHA-256 over names, shapes and values of the base (non-adapter)
    /// parameters.
    pub fn base_checksum(&self) -> String {
        let mut bytes = Vec::new();
        self.visit_params(&mut |name, group, view| {
            if group == ParamGroup::Base {
                bytes.extend_from_slice(name.as_bytes());
                for &d in view.shape() {
                    bytes.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in view.iter() {
                    bytes.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        });
        seed::sha256_hex(&bytes)
    }

    pub fn count_params(&self, group: ParamGroup) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, g, v| {
            if g == group {
                n += v.len();
            }
        });
        n
    }

    fn check_images(&self, images: &ArrayView4<T>) -> Result<()> {
        let s = self.spec.input_size;
        let shape = images.shape();
        if shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::shape("image batch", ["B", "3", &s.to_string(), &s.to_string()], shape));
        }
        if shape[0] == 0 {
            return Err(Error::Empty("image batch".into()));
        }
        Ok(())
    }

    /// Rows ordered (image, grid row, grid col); columns (channel, dy, dx).
    fn patchify(&self, images: &ArrayView4<T>) -> Array2<T> {
        let b = images.shape()[0];
        let side = self.spec.grid_side();
        let p = self.spec.patch_size();
        let mut out = Array2::zeros((b * side * side, 3 * p * p));
        for bi in 0..b {
            for gy in 0..side {
                for gx in 0..side {
                    let mut row = out.row_mut((bi * side + gy) * side + gx);
                    let mut col = 0;
                    for c in 0..3 {
                        let tile = images.slice(s![bi, c, gy * p..(gy + 1) * p, gx * p..(gx + 1) * p]);
                        for &v in tile.iter() {
                            row[col] = v;
                            col += 1;
                        }
                    }
                }
            }
        }
        out
    }

    fn forward_impl(
        &self,
        images: ArrayView4<T>,
        mut train_rng: Option<&mut Rng>,
        keep_cache: bool,
        keep_patches: bool,
    ) -> Result<(Array2<T>, Option<ForwardCache<T>>)> {
        self.check_images(&images)?;
        let spec = &self.spec;
        let batch = images.shape()[0];
        let seq = spec.seq_len();
        let regs = spec.register_tokens;
        let n_patch = spec.patch_grid;
        let patches = self.patchify(&images);
        let (embedded, _) = self.patch_embed.forward(patches.view(), None);

        let mut x = Array2::zeros((batch * seq, spec.width));
        for b in 0..batch {
            let base = b * seq;
            let mut cls = x.row_mut(base);
            cls.assign(&self.cls_token);
            cls += &self.pos_embed.row(0);
            for r in 0..regs {
                x.row_mut(base + 1 + r).assign(&self.register_tokens.row(r));
            }
            for j in 0..n_patch {
                let mut row = x.row_mut(base + 1 + regs + j);
                row.assign(&embedded.row(b * n_patch + j));
                row += &self.pos_embed.row(1 + j);
            }
        }

        let mut block_caches = Vec::with_capacity(if keep_cache { self.blocks.len() } else { 0 });
        for block in &self.blocks {
            let (n1_out, n1) = block.norm1.forward(x.view());
            let (q, qc) = block.q.forward(n1_out.view(), train_rng.as_deref_mut());
            let (k, kc) = block.k.forward(n1_out.view(), train_rng.as_deref_mut());
            let (v, vc) = block.v.forward(n1_out.view(), train_rng.as_deref_mut());
            let (attn, probs) = layers::attention(&q, &k, &v, batch, seq, spec.heads);
            let (o, oc) = block.o.forward(attn.view(), train_rng.as_deref_mut());
            x += &o;
            let (h2, n2) = block.norm2.forward(x.view());
            let (f1, c1) = block.fc1.forward(h2.view(), train_rng.as_deref_mut());
            let g = layers::gelu(&f1);
            let (f2, c2) = block.fc2.forward(g.view(), train_rng.as_deref_mut());
            x += &f2;
            if keep_cache {
                block_caches.push(BlockCache {
                    n1,
                    h1: n1_out,
                    q,
                    k,
                    v,
                    qc,
                    kc,
                    vc,
                    probs,
                    attn,
                    oc,
                    n2,
                    h2,
                    f1,
                    c1,
                    g,
                    c2,
                });
            }
        }
        let (out, final_norm) = self.norm.forward(x.view());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backbone tokens".into()));
        }
        let cache = keep_cache.then(|| ForwardCache {
            batch,
            patches: keep_patches.then_some(patches),
            blocks: block_caches,
            final_norm,
        });
        Ok((out, cache))
    }

    /// Output tokens `B x (1 + registers + P) x d`; the first token is the
    /// class token. Runs in inference mode.
    pub fn forward_tokens(&self, images: ArrayView4<T>) -> Result<Array3<T>> {
        let (tokens, _) = self.forward_impl(images, None, false, false)?;
        let batch = images.shape()[0];
        Ok(tokens
            .into_shape_with_order((batch, self.spec.seq_len(), self.spec.width))
            .expect("token layout"))
    }

    /// Fixed-length embeddings `B x feature_dim` under the backbone's rule.
    pub fn embed(&self, images: ArrayView4<T>) -> Result<Array2<T>> {
        let (tokens, _) = self.forward_impl(images, None, false, false)?;
        Ok(self.pool(tokens.view(), images.shape()[0]))
    }

    /// Training-mode forward: returns embeddings and the cache for
    /// [`Self::backward`]. `train_rng` drives adapter dropout.
    pub fn embed_train(
        &self,
        images: ArrayView4<T>,
        train_rng: Option<&mut Rng>,
        mask: GradMask,
    ) -> Result<(Array2<T>, ForwardCache<T>)> {
        let (tokens, cache) = self.forward_impl(images, train_rng, true, mask.base)?;
        let batch = images.shape()[0];
        Ok((self.pool(tokens.view(), batch), cache.expect("cache requested")))
    }

    /// Applies the embedding rule to a `(B * seq) x d` token matrix.
    pub fn pool(&self, tokens: ArrayView2<T>, batch: usize) -> Array2<T> {
        pool_tokens(
            tokens,
            batch,
            self.spec.seq_len(),
            self.spec.register_tokens,
            self.spec.embedding_rule,
        )
    }

    fn unpool(&self, dfeat: ArrayView2<T>, batch: usize) -> Array2<T> {
        let spec = &self.spec;
        let seq = spec.seq_len();
        let d = spec.width;
        let first_patch = 1 + spec.register_tokens;
        let mut dtok = Array2::zeros((batch * seq, d));
        for b in 0..batch {
            dtok.row_mut(b * seq).assign(&dfeat.slice(s![b, 0..d]));
            if spec.embedding_rule == EmbeddingRule::ClassPlusMeanPatch {
                let share = dfeat.slice(s![b, d..2 * d]).mapv(|v| v / T::from_usize(spec.patch_grid).expect("P"));
                for j in 0..spec.patch_grid {
                    dtok.row_mut(b * seq + first_patch + j).assign(&share);
                }
            }
        }
        dtok
    }

    /// Backpropagates `dL/d(embedding)` and returns gradients for the groups
    /// selected by `mask`.
    pub fn backward(&self, cache: &ForwardCache<T>, dfeat: ArrayView2<T>, mask: GradMask) -> Grads<T> {
        let mut grads = Grads::new();
        if !mask.any() {
            return grads;
        }
        let spec = &self.spec;
        let batch = cache.batch;
        let seq = spec.seq_len();
        let heads = spec.heads;
        let dtok = self.unpool(dfeat, batch);
        let mut dx = self.norm.backward(&cache.final_norm, dtok.view(), mask.base, "norm", &mut grads);

        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let pre = format!("blocks.{i}");
            let dg = block
                .fc2
                .backward(bc.g.view(), &bc.c2, dx.view(), mask, true, &format!("{pre}.mlp.fc2"), &mut grads)
                .expect("dx");
            let df1 = layers::gelu_backward(&bc.f1, dg.view());
            let dh2 = block
                .fc1
                .backward(bc.h2.view(), &bc.c1, df1.view(), mask, true, &format!("{pre}.mlp.fc1"), &mut grads)
                .expect("dx");
            dx += &block.norm2.backward(&bc.n2, dh2.view(), mask.base, &format!("{pre}.norm2"), &mut grads);

            let dattn = block
                .o
                .backward(bc.attn.view(), &bc.oc, dx.view(), mask, true, &format!("{pre}.attn.o"), &mut grads)
                .expect("dx");
            let (dq, dk, dv) =
                layers::attention_backward(&bc.q, &bc.k, &bc.v, &bc.probs, dattn.view(), batch, seq, heads);
            let mut dh1 = block
                .q
                .backward(bc.h1.view(), &bc.qc, dq.view(), mask, true, &format!("{pre}.attn.q"), &mut grads)
                .expect("dx");
            dh1 += &block
                .k
                .backward(bc.h1.view(), &bc.kc, dk.view(), mask, true, &format!("{pre}.attn.k"), &mut grads)
                .expect("dx");
            dh1 += &block
                .v
                .backward(bc.h1.view(), &bc.vc, dv.view(), mask, true, &format!("{pre}.attn.v"), &mut grads)
                .expect("dx");
            dx += &block.norm1.backward(&bc.n1, dh1.view(), mask.base, &format!("{pre}.norm1"), &mut grads);
        }

        if mask.base {
            let regs = spec.register_tokens;
            let n_patch = spec.patch_grid;
            let mut dcls = Array1::zeros(spec.width);
            let mut dpos = Array2::zeros(self.pos_embed.raw_dim());
            let mut dreg = Array2::zeros(self.register_tokens.raw_dim());
            let mut dpatch = Array2::zeros((batch * n_patch, spec.width));
            for b in 0..batch {
                let base = b * seq;
                dcls += &dx.row(base);
                let mut p0 = dpos.row_mut(0);
                p0 += &dx.row(base);
                for r in 0..regs {
                    let mut row = dreg.row_mut(r);
                    row += &dx.row(base + 1 + r);
                }
                for j in 0..n_patch {
                    let src = dx.row(base + 1 + regs + j);
                    let mut pj = dpos.row_mut(1 + j);
                    pj += &src;
                    dpatch.row_mut(b * n_patch + j).assign(&src);
                }
            }
            grads.insert("cls_token".into(), dcls.into_dyn());
            grads.insert("pos_embed".into(), dpos.into_dyn());
            if regs > 0 {
                grads.insert("register_tokens".into(), dreg.into_dyn());
            }
            let patches = cache.patches.as_ref().expect("patches cached for base gradients");
            grads.insert("patch_embed.weight".into(), dpatch.t().dot(patches).into_dyn());
            grads.insert("patch_embed.bias".into(), dpatch.sum_axis(Axis(0)).into_dyn());
        }
        grads
    }

    /// Replaces every adapted projection weight by `W + gamma * B A` and
    /// drops the adapters.
    pub fn fold_adapters(&mut self) {
        for block in &mut self.blocks {
            for suffix in PROJECTIONS {
                let proj = block.projection_mut(suffix).expect("known projection");
                if let Some(adapter) = proj.adapter.take() {
                    let delta = adapter.b.dot(&adapter.a);
                    proj.weight.scaled_add(adapter.gamma, &delta);
                }
            }
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| PROJECTIONS.iter().any(|s| b.projection(s).is_some_and(|p| p.adapter.is_some())))
    }

    /// Copies a named parameter tensor into place, checking shape.
    pub(crate) fn assign_param(&mut self, name: &str, values: ArrayViewD<T>) -> Result<()> {
        let mut found = false;
        let mut result = Ok(());
        self.visit_params_mut(&mut |n, _, mut view| {
            if n == name {
                found = true;
                if view.shape() != values.shape() {
                    result = Err(Error::shape(name.to_string(), view.shape(), values.shape()));
                } else {
                    view.assign(&values);
                }
            }
        });
        if !found {
            return Err(Error::MissingTensor(name.to_string()));
        }
        result
    }
}

pub(crate) fn pool_tokens<T: Real>(
    tokens: ArrayView2<T>,
    batch: usize,
    seq: usize,
    registers: usize,
    rule: EmbeddingRule,
) -> Array2<T> {
    let d = tokens.ncols();
    let n = rule.feature_dim(d);
    let first_patch = 1 + registers;
    let mut out = Array2::zeros((batch, n));
    for b in 0..batch {
        out.slice_mut(s![b, 0..d]).assign(&tokens.row(b * seq));
        if rule == EmbeddingRule::ClassPlusMeanPatch {
            let patches = tokens.slice(s![b * seq + first_patch..(b + 1) * seq, ..]);
            let mean = patches.mean_axis(Axis(0)).expect("nonempty patch set");
            out.slice_mut(s![b, d..2 * d]).assign(&mean);
        }
    }
    out
}

/// Applies the embedding rule to an explicit `B x seq x d` token tensor.
pub fn pool_token_tensor<T: Real>(tokens: &Array3<T>, registers: usize, rule: EmbeddingRule) -> Array2<T> {
    let (b, seq, d) = tokens.dim();
    let flat = tokens
        .view()
        .into_shape_with_order((b * seq, d))
        .expect("contiguous tokens")
        .into_dimensionality::<Ix2>()
        .expect("2-d");
    pool_tokens(flat, b, seq, registers, rule)
}
