//! Token assembly, the foreground/background self-attention branches,
//! modality dropout and the grouped InfoNCE objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::TextPayload;
use crate::autograd::{Graph, Var};
use crate::decompose::VisualDecomposition;
use crate::error::{Error, Result};
use crate::nn::{lecun, near_identity, normal, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_TAU_TEMP: f64 = 0.07;
pub const DEFAULT_DROPOUT_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Learned,
    Visual,
    Text,
    Audio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Anchor,
    Positive,
    Negative,
}

/// Named positions in the two token sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    TokenPos,
    VisualSupport,
    VisualPositive,
    TextCategory,
    TextDescriptor,
    Audio,
    TokenNeg,
    VisualNegative,
    TextBackground,
}

impl Slot {
    pub const FOREGROUND: [Slot; 6] = [
        Slot::TokenPos,
        Slot::VisualSupport,
        Slot::VisualPositive,
        Slot::TextCategory,
        Slot::TextDescriptor,
        Slot::Audio,
    ];
    pub const BACKGROUND: [Slot; 3] = [Slot::TokenNeg, Slot::VisualNegative, Slot::TextBackground];

    pub fn role(self) -> Role {
        match self {
            Slot::TokenPos | Slot::VisualSupport | Slot::TextCategory | Slot::Audio => Role::Anchor,
            Slot::VisualPositive | Slot::TextDescriptor => Role::Positive,
            Slot::TokenNeg | Slot::VisualNegative | Slot::TextBackground => Role::Negative,
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            Slot::TokenPos | Slot::TokenNeg => Modality::Learned,
            Slot::VisualSupport | Slot::VisualPositive | Slot::VisualNegative => Modality::Visual,
            Slot::TextCategory | Slot::TextDescriptor | Slot::TextBackground => Modality::Text,
            Slot::Audio => Modality::Audio,
        }
    }
}

/// One flag per non-learned modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Modalities {
    pub visual: bool,
    pub text: bool,
    pub audio: bool,
}

impl Modalities {
    pub const ALL: Modalities = Modalities {
        visual: true,
        text: true,
        audio: true,
    };
    pub const NONE: Modalities = Modalities {
        visual: false,
        text: false,
        audio: false,
    };

    pub fn get(&self, m: Modality) -> bool {
        match m {
            Modality::Learned => true,
            Modality::Visual => self.visual,
            Modality::Text => self.text,
            Modality::Audio => self.audio,
        }
    }

    pub fn any(&self) -> bool {
        self.visual || self.text || self.audio
    }

    pub fn and(self, o: Modalities) -> Modalities {
        Modalities {
            visual: self.visual && o.visual,
            text: self.text && o.text,
            audio: self.audio && o.audio,
        }
    }

    /// Short label such as `visual+audio`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.visual, "visual"), (self.text, "text"), (self.audio, "audio")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for Modalities {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutRates {
    pub visual: f64,
    pub text: f64,
    pub audio: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        Self::uniform(DEFAULT_DROPOUT_RATE)
    }
}

impl DropoutRates {
    pub fn uniform(rate: f64) -> Self {
        Self {
            visual: rate,
            text: rate,
            audio: rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("visual", self.visual), ("text", self.text), ("audio", self.audio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("{name} dropout rate {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Draw the set of modalities to drop for one training episode. Only
/// modalities in `present` can be dropped; a draw that would drop every
/// present modality is rejected and redrawn.
pub fn draw_dropout(rates: &DropoutRates, present: Modalities, rng: &mut impl Rng) -> Result<Modalities> {
    rates.validate()?;
    let active: Vec<(Modality, f64)> = [
        (Modality::Visual, rates.visual),
        (Modality::Text, rates.text),
        (Modality::Audio, rates.audio),
    ]
    .into_iter()
    .filter(|(m, _)| present.get(*m))
    .collect();
    if active.is_empty() {
        return Ok(Modalities::NONE);
    }
    if active.iter().all(|(_, r)| *r >= 1.0) {
        return Err(Error::config(
            "dropout rate 1 for every present modality would drop them all",
        ));
    }
    loop {
        let mut dropped = Modalities::NONE;
        for &(m, r) in &active {
            let hit = rng.random::<f64>() < r;
            match m {
                Modality::Visual => dropped.visual = hit,
                Modality::Text => dropped.text = hit,
                Modality::Audio => dropped.audio = hit,
                Modality::Learned => {}
            }
        }
        if active.iter().any(|(m, _)| !dropped.get(*m)) {
            return Ok(dropped);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Token {
    pub slot: Slot,
    /// `1 × d`; `None` when the modality is absent from the episode.
    pub value: Option<Var>,
    pub dropped: bool,
}

impl Token {
    pub fn active(&self) -> bool {
        self.value.is_some() && !self.dropped
    }
}

/// Ordered foreground and background token sequences with per-token tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBundle {
    pub fg: Vec<Token>,
    pub bg: Vec<Token>,
}

impl TokenBundle {
    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.fg.iter().chain(&self.bg)
    }

    pub fn active_fg(&self) -> Vec<Token> {
        self.fg.iter().copied().filter(Token::active).collect()
    }

    pub fn active_bg(&self) -> Vec<Token> {
        self.bg.iter().copied().filter(Token::active).collect()
    }

    /// Number of surviving tokens per role (anchor, positive, negative).
    pub fn role_counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for t in self.tokens().filter(|t| t.active()) {
            match t.slot.role() {
                Role::Anchor => c.0 += 1,
                Role::Positive => c.1 += 1,
                Role::Negative => c.2 += 1,
            }
        }
        c
    }

    /// Mark every token of the dropped modalities.
    pub fn with_dropout(mut self, dropped: Modalities) -> Self {
        for t in self.fg.iter_mut().chain(self.bg.iter_mut()) {
            if t.slot.modality() != Modality::Learned && dropped.get(t.slot.modality()) {
                t.dropped = true;
            }
        }
        self
    }
}

/// Projected token inputs; each `Var` is `1 × d`.
#[derive(Debug, Clone, Copy)]
pub struct TokenInputs {
    /// `(f_s, f_pos, f_neg)`.
    pub visual: Option<(Var, Var, Var)>,
    /// `(f_c, f_d, f_bg)`.
    pub text: Option<(Var, Var, Var)>,
    pub audio: Option<Var>,
    pub token_pos: Var,
    pub token_neg: Var,
}

pub fn assemble_tokens(g: &Graph, inputs: &TokenInputs, dim: usize) -> Result<TokenBundle> {
    let check = |v: Var, what: &str| -> Result<Option<Var>> {
        let t = g.value(v);
        if t.len() != dim || t.rows() != 1 {
            return Err(Error::config(format!(
                "{what} token has shape {:?}, expected [1, {dim}]",
                t.shape()
            )));
        }
        Ok(Some(v))
    };
    let (vs, vp, vn) = match inputs.visual {
        Some((a, b, c)) => (check(a, "f_s")?, check(b, "f_pos")?, check(c, "f_neg")?),
        None => (None, None, None),
    };
    let (tc, td, tb) = match inputs.text {
        Some((a, b, c)) => (check(a, "f_c")?, check(b, "f_d")?, check(c, "f_bg")?),
        None => (None, None, None),
    };
    let au = match inputs.audio {
        Some(a) => check(a, "f_a")?,
        None => None,
    };
    let tp = check(inputs.token_pos, "token_pos")?;
    let tn = check(inputs.token_neg, "token_neg")?;
    let token = |slot, value: Option<Var>| Token {
        slot,
        value,
        dropped: value.is_none(),
    };
    Ok(TokenBundle {
        fg: vec![
            token(Slot::TokenPos, tp),
            token(Slot::VisualSupport, vs),
            token(Slot::VisualPositive, vp),
            token(Slot::TextCategory, tc),
            token(Slot::TextDescriptor, td),
            token(Slot::Audio, au),
        ],
        bg: vec![
            token(Slot::TokenNeg, tn),
            token(Slot::VisualNegative, vn),
            token(Slot::TextBackground, tb),
        ],
    })
}

/// Query, key and value matrices of one self-attention branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionBranch {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub dim: usize,
}

impl AttentionBranch {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let query = store.add(format!("{name}.query"), lecun(&[dim, dim], dim, rng));
        let key = store.add(format!("{name}.key"), lecun(&[dim, dim], dim, rng));
        let value = store.add(format!("{name}.value"), near_identity(dim, 0.02, rng));
        Self { query, key, value, dim }
    }

    /// `softmax(X Wq (X Wk)ᵀ / √d) X Wv`; returns the output and the
    /// attention matrix.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, x: Var) -> (Var, Var) {
        let q = g.param(store, self.query);
        let k = g.param(store, self.key);
        let v = g.param(store, self.value);
        let q = g.matmul(x, q);
        let k = g.matmul(x, k);
        let v = g.matmul(x, v);
        let logits = g.matmul_nt(q, k);
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let attn = g.softmax_rows(logits);
        (g.matmul(attn, v), attn)
    }
}

/// Mean over anchor-positive pairs of
/// `−log(exp(a·p/τ) / Σ_n exp(a·n/τ))` on L2-normalised rows. With
/// `include_positive` the positive term joins the denominator.
pub fn contrastive_loss(
    g: &mut Graph,
    anchors: Var,
    positives: Var,
    negatives: Var,
    tau: f64,
    include_positive: bool,
) -> Var {
    let a = g.normalize_rows(anchors);
    let p = g.normalize_rows(positives);
    let n = g.normalize_rows(negatives);
    let s_ap = g.matmul_nt(a, p);
    let s_an = g.matmul_nt(a, n);
    contrastive_from_scores(g, s_ap, s_an, tau, include_positive)
}

/// The same objective from precomputed similarities: `s_ap` is
/// anchors × positives, `s_an` anchors × negatives.
pub fn contrastive_from_scores(g: &mut Graph, s_ap: Var, s_an: Var, tau: f64, include_positive: bool) -> Var {
    let s_ap = g.scale(s_ap, 1.0 / tau);
    let s_an = g.scale(s_an, 1.0 / tau);
    let mean_pos = g.mean(s_ap);
    let denom = if include_positive {
        let n_pos = g.value(s_ap).cols();
        let ap_t = g.transpose(s_ap);
        let an_t = g.transpose(s_an);
        let mut acc = None;
        for j in 0..n_pos {
            let col = g.select_rows(ap_t, &[j]);
            let stacked = g.concat(&[col, an_t]);
            let rows = g.transpose(stacked);
            let lse = g.logsumexp_rows(rows);
            let m = g.mean(lse);
            acc = Some(match acc {
                Some(s) => g.add(s, m),
                None => m,
            });
        }
        let total = acc.expect("at least one positive");
        g.scale(total, 1.0 / n_pos as f64)
    } else {
        let lse = g.logsumexp_rows(s_an);
        g.mean(lse)
    };
    let neg_pos = g.scale(mean_pos, -1.0);
    g.add(denom, neg_pos)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuseConfig {
    pub tau_temp: f64,
    pub infonce_include_positive: bool,
}

impl Default for FuseConfig {
    fn default() -> Self {
        Self {
            tau_temp: DEFAULT_TAU_TEMP,
            infonce_include_positive: false,
        }
    }
}

/// Trainable parameters of the fuse stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseParams {
    pub dim: usize,
    pub visual_dim: usize,
    pub token_pos: ParamId,
    pub token_neg: ParamId,
    /// Shared `d_vis → d` map for visual prototypes and query proposals.
    pub visual_proj: Linear,
    pub text_proj: Linear,
    pub audio_proj: Linear,
    pub attn_pos: AttentionBranch,
    pub attn_neg: AttentionBranch,
}

impl FuseParams {
    pub fn new(store: &mut ParamStore, visual_dim: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let token_pos = store.add("fuse.token_pos", normal(&[1, dim], 1.0, rng));
        let token_neg = store.add("fuse.token_neg", normal(&[1, dim], 1.0, rng));
        let visual_proj = Linear::new(store, "fuse.visual_proj", visual_dim, dim, true, rng);
        let text_proj = Linear::new(store, "fuse.text_proj", dim, dim, false, rng);
        *store.get_mut(text_proj.weight) = near_identity(dim, 0.02, rng);
        let audio_proj = Linear::new(store, "fuse.audio_proj", dim, dim, false, rng);
        *store.get_mut(audio_proj.weight) = near_identity(dim, 0.02, rng);
        let attn_pos = AttentionBranch::new(store, "fuse.attn_pos", dim, rng);
        let attn_neg = AttentionBranch::new(store, "fuse.attn_neg", dim, rng);
        Self {
            dim,
            visual_dim,
            token_pos,
            token_neg,
            visual_proj,
            text_proj,
            audio_proj,
            attn_pos,
            attn_neg,
        }
    }

    /// Parameters fed only by one modality's tokens.
    pub fn modality_params(&self, m: Modality) -> Vec<ParamId> {
        let lin = |l: &Linear| l.bias.into_iter().chain([l.weight]).collect::<Vec<_>>();
        match m {
            Modality::Learned => vec![self.token_pos, self.token_neg],
            Modality::Visual => lin(&self.visual_proj),
            Modality::Text => lin(&self.text_proj),
            Modality::Audio => lin(&self.audio_proj),
        }
    }
}

/// Raw per-episode inputs to the fuse stage. A `None` modality is absent.
#[derive(Debug, Clone, Copy)]
pub struct FuseInputs<'a> {
    pub visual: Option<&'a VisualDecomposition>,
    pub text: Option<&'a TextPayload>,
    pub audio: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct FuseOutput {
    pub bundle: TokenBundle,
    /// Attended active foreground tokens, in sequence order.
    pub fg_attended: Var,
    pub bg_attended: Var,
    pub contrastive: Option<Var>,
}

impl FuseOutput {
    fn row(tokens: &[Token], slot: Slot) -> Option<usize> {
        tokens.iter().filter(|t| t.active()).position(|t| t.slot == slot)
    }

    /// Row of `slot` within the attended sequence it belongs to.
    pub fn row_of(&self, slot: Slot) -> Option<usize> {
        if Slot::FOREGROUND.contains(&slot) {
            Self::row(&self.bundle.fg, slot)
        } else {
            Self::row(&self.bundle.bg, slot)
        }
    }
}

fn project_row(g: &mut Graph, store: &ParamStore, lin: &Linear, v: &[f64]) -> Var {
    let x = g.constant(Tensor::row(v.to_vec()));
    lin.forward(g, store, x)
}

/// Full fuse stage: project inputs, assemble, apply `dropped`, attend each
/// branch and compute the contrastive loss when every group is nonempty.
pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    params: &FuseParams,
    config: &FuseConfig,
    inputs: &FuseInputs<'_>,
    dropped: Modalities,
) -> Result<FuseOutput> {
    if config.tau_temp <= 0.0 || !config.tau_temp.is_finite() {
        return Err(Error::config(format!("temperature {} must be positive", config.tau_temp)));
    }
    let vd = params.visual_dim;
    let d = params.dim;
    let visual = match inputs.visual {
        Some(v) => {
            if v.f_s.len() != vd {
                return Err(Error::config(format!("visual prototype has dim {}, expected {vd}", v.f_s.len())));
            }
            let stacked = g.constant(Tensor::new([3, vd], [&v.f_s[..], &v.f_pos, &v.f_neg].concat()));
            let proj = params.visual_proj.forward(g, store, stacked);
            Some((g.select_rows(proj, &[0]), g.select_rows(proj, &[1]), g.select_rows(proj, &[2])))
        }
        None => None,
    };
    let vec_dim = |v: &[f64], what: &str| -> Result<()> {
        if v.len() == d {
            Ok(())
        } else {
            Err(Error::config(format!("{what} embedding has dim {}, expected {d}", v.len())))
        }
    };
    let text = match inputs.text {
        Some(t) => {
            vec_dim(&t.category_embedding, "category")?;
            vec_dim(&t.descriptor_embedding, "descriptor")?;
            vec_dim(&t.background_embedding, "background")?;
            Some((
                project_row(g, store, &params.text_proj, &t.category_embedding),
                project_row(g, store, &params.text_proj, &t.descriptor_embedding),
                project_row(g, store, &params.text_proj, &t.background_embedding),
            ))
        }
        None => None,
    };
    let audio = match inputs.audio {
        Some(a) => {
            vec_dim(a, "audio")?;
            Some(project_row(g, store, &params.audio_proj, a))
        }
        None => None,
    };
    let token_pos = g.param(store, params.token_pos);
    let token_neg = g.param(store, params.token_neg);
    let bundle = assemble_tokens(
        g,
        &TokenInputs {
            visual,
            text,
            audio,
            token_pos,
            token_neg,
        },
        d,
    )?
    .with_dropout(dropped);

    let stack = |g: &mut Graph, tokens: &[Token]| {
        let vars: Vec<Var> = tokens.iter().filter_map(|t| t.value).collect();
        g.concat(&vars)
    };
    let fg = bundle.active_fg();
    let bg = bundle.active_bg();
    let fg_in = stack(g, &fg);
    let bg_in = stack(g, &bg);
    let (fg_attended, _) = params.attn_pos.attend(g, store, fg_in);
    let (bg_attended, _) = params.attn_neg.attend(g, store, bg_in);

    let pick = |tokens: &[Token], role: Role| -> Vec<usize> {
        tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.slot.role() == role)
            .map(|(i, _)| i)
            .collect()
    };
    let (ai, pi, ni) = (pick(&fg, Role::Anchor), pick(&fg, Role::Positive), pick(&bg, Role::Negative));
    let contrastive = if ai.is_empty() || pi.is_empty() || ni.is_empty() {
        log::warn!(
            "contrastive group empty after dropout ({} anchors, {} positives, {} negatives); skipping",
            ai.len(),
            pi.len(),
            ni.len()
        );
        None
    } else {
        let a = g.select_rows(fg_attended, &ai);
        let p = g.select_rows(fg_attended, &pi);
        let n = g.select_rows(bg_attended, &ni);
        Some(contrastive_loss(g, a, p, n, config.tau_temp, config.infonce_include_positive))
    };
    Ok(FuseOutput {
        bundle,
        fg_attended,
        bg_attended,
        contrastive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_relative_error;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn loss_value(a: &[Vec<f64>], p: &[Vec<f64>], n: &[Vec<f64>], tau: f64, incl: bool) -> f64 {
        let mut g = Graph::new();
        let m = |g: &mut Graph, rows: &[Vec<f64>]| g.constant(Tensor::new([rows.len(), rows[0].len()], rows.concat()));
        let (av, pv, nv) = (m(&mut g, a), m(&mut g, p), m(&mut g, n));
        let l = contrastive_loss(&mut g, av, pv, nv, tau, incl);
        g.value(l).item()
    }

    /// Direct evaluation, one pair at a time.
    fn oracle(a: &[Vec<f64>], p: &[Vec<f64>], n: &[Vec<f64>], tau: f64, incl: bool) -> f64 {
        let unit = |v: &Vec<f64>| {
            let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let mut total = 0.0;
        for ai in a.iter().map(unit) {
            for pi in p.iter().map(unit) {
                let num = (dot(&ai, &pi) / tau).exp();
                let mut den: f64 = n.iter().map(unit).map(|ni| (dot(&ai, &ni) / tau).exp()).sum();
                if incl {
                    den += num;
                }
                total += -(num / den).ln();
            }
        }
        total / (a.len() * p.len()) as f64
    }

    #[test]
    fn contrastive_examples() {
        // a·p = a·n, τ = 1 → 0
        let l = loss_value(&[vec![1.0, 0.0]], &[vec![0.5, 0.5]], &[vec![0.5, -0.5]], 1.0, false);
        assert!(l.abs() < 1e-12);
        // a·p = 1, a·n = 0, τ = 1 → −1
        let l = loss_value(&[vec![1.0, 0.0]], &[vec![2.0, 0.0]], &[vec![0.0, 3.0]], 1.0, false);
        assert!((l + 1.0).abs() < 1e-12);
        // standard form: −log(e/(e+1))
        let l = loss_value(&[vec![1.0, 0.0]], &[vec![2.0, 0.0]], &[vec![0.0, 3.0]], 1.0, true);
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn four_by_two_pairs_are_averaged() {
        let mut r = rng();
        let mk = |n: usize, r: &mut ChaCha8Rng| (0..n).map(|_| normal(&[5], 1.0, r).into_data()).collect::<Vec<_>>();
        let (a, p, n) = (mk(4, &mut r), mk(2, &mut r), mk(3, &mut r));
        for incl in [false, true] {
            let got = loss_value(&a, &p, &n, 0.07, incl);
            let want = oracle(&a, &p, &n, 0.07, incl);
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut r = rng();
        let a = normal(&[4, 8], 1.0, &mut r);
        let p = normal(&[2, 8], 1.0, &mut r);
        let n = normal(&[3, 8], 1.0, &mut r);
        for incl in [false, true] {
            let err = max_relative_error(&[a.clone(), p.clone(), n.clone()], 1e-6, |g, v| {
                contrastive_loss(g, v[0], v[1], v[2], 0.5, incl)
            });
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn single_token_attention_is_the_value_map() {
        let mut store = ParamStore::new();
        let br = AttentionBranch::new(&mut store, "b", 4, &mut rng());
        *store.get_mut(br.value) = near_identity(4, 0.0, &mut rng());
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.3, -1.0, 2.0, 0.5]));
        let (out, attn) = br.attend(&mut g, &store, x);
        assert_eq!(g.value(attn).data(), &[1.0]);
        assert_eq!(g.value(out).data(), g.value(x).data());
    }

    #[test]
    fn missing_visual_slots_are_dropped_and_tags_match() {
        let mut store = ParamStore::new();
        let params = FuseParams::new(&mut store, 6, 4, &mut rng());
        let text = TextPayload {
            category_embedding: vec![1.0, 0.0, 0.0, 0.0],
            descriptor_embedding: vec![0.0, 1.0, 0.0, 0.0],
            background_embedding: vec![0.0, 0.0, 1.0, 0.0],
            raw_strings: Default::default(),
        };
        let audio = [0.5, 0.5, 0.5, 0.5];
        let vis = VisualDecomposition {
            positive_set: vec![0],
            negative_set: vec![],
            f_s: vec![1.0; 6],
            f_pos: vec![0.5; 6],
            f_neg: vec![-1.0; 6],
        };
        let mut g = Graph::new();
        let full = fuse(
            &mut g,
            &store,
            &params,
            &FuseConfig::default(),
            &FuseInputs {
                visual: Some(&vis),
                text: Some(&text),
                audio: Some(&audio),
            },
            Modalities::NONE,
        )
        .unwrap();
        assert_eq!(full.bundle.fg.len(), 6);
        assert_eq!(full.bundle.bg.len(), 3);
        assert_eq!(full.bundle.role_counts(), (4, 2, 3));
        let order: Vec<Slot> = full.bundle.fg.iter().map(|t| t.slot).collect();
        assert_eq!(order, Slot::FOREGROUND);
        assert!(full.contrastive.is_some());

        let zero_shot = fuse(
            &mut g,
            &store,
            &params,
            &FuseConfig::default(),
            &FuseInputs {
                visual: None,
                text: Some(&text),
                audio: Some(&audio),
            },
            Modalities::NONE,
        )
        .unwrap();
        for t in zero_shot.bundle.tokens() {
            assert_eq!(t.dropped, t.slot.modality() == Modality::Visual, "{:?}", t.slot);
        }
        assert_eq!(g.value(zero_shot.fg_attended).rows(), 4);
        assert_eq!(zero_shot.row_of(Slot::TextCategory), Some(1));
        assert_eq!(zero_shot.row_of(Slot::VisualSupport), None);

        let bad_audio = [1.0, 2.0];
        let err = fuse(
            &mut g,
            &store,
            &params,
            &FuseConfig::default(),
            &FuseInputs {
                visual: None,
                text: None,
                audio: Some(&bad_audio),
            },
            Modalities::NONE,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn empty_positive_group_skips_the_loss() {
        let mut store = ParamStore::new();
        let params = FuseParams::new(&mut store, 6, 4, &mut rng());
        let audio = [0.5, 0.5, 0.5, 0.5];
        let mut g = Graph::new();
        let out = fuse(
            &mut g,
            &store,
            &params,
            &FuseConfig::default(),
            &FuseInputs {
                visual: None,
                text: None,
                audio: Some(&audio),
            },
            Modalities::NONE,
        )
        .unwrap();
        assert!(out.contrastive.is_none());
    }

    #[test]
    fn dropout_rates() {
        let mut r = rng();
        assert_eq!(draw_dropout(&DropoutRates::uniform(0.0), Modalities::ALL, &mut r).unwrap(), Modalities::NONE);
        let audio_only = DropoutRates {
            visual: 0.0,
            text: 0.0,
            audio: 1.0,
        };
        for _ in 0..100 {
            let d = draw_dropout(&audio_only, Modalities::ALL, &mut r).unwrap();
            assert!(d.audio && !d.visual && !d.text);
        }
        assert!(draw_dropout(&DropoutRates::uniform(1.2), Modalities::ALL, &mut r).is_err());
        assert!(draw_dropout(&DropoutRates::uniform(-0.1), Modalities::ALL, &mut r).is_err());
        assert!(draw_dropout(&DropoutRates::uniform(1.0), Modalities::ALL, &mut r).is_err());
    }

    #[test]
    fn dropout_frequency_and_never_all() {
        let mut r = rng();
        let rates = DropoutRates::uniform(0.3);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let d = draw_dropout(&rates, Modalities::ALL, &mut r).unwrap();
            assert!(!(d.visual && d.text && d.audio));
            counts[0] += d.visual as usize;
            counts[1] += d.text as usize;
            counts[2] += d.audio as usize;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((0.27..=0.33).contains(&f), "{f}");
        }
    }

    fn attention_rows(seed: u64, n: usize) -> (Tensor, Tensor, Vec<usize>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let br = AttentionBranch::new(&mut store, "b", 5, &mut r);
        let x = normal(&[n, 5], 1.0, &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut r);
        let px = Tensor::new([n, 5], perm.iter().flat_map(|&i| x.data()[i * 5..i * 5 + 5].to_vec()).collect());
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (out, attn) = br.attend(&mut g, &store, xv);
        for row in g.value(attn).data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let pv = g.constant(px);
        let (pout, _) = br.attend(&mut g, &store, pv);
        (g.value(out).clone(), g.value(pout).clone(), perm)
    }

    proptest! {
        #[test]
        fn attention_is_row_stochastic_and_permutation_equivariant(seed in any::<u64>(), n in 1usize..7) {
            let (out, pout, perm) = attention_rows(seed, n);
            for (i, &src) in perm.iter().enumerate() {
                for c in 0..5 {
                    prop_assert!((pout.data()[i * 5 + c] - out.data()[src * 5 + c]).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn contrastive_is_monotone_in_similarities(
            ap in proptest::collection::vec(-1.0f64..1.0, 4 * 2),
            an in proptest::collection::vec(-1.0f64..1.0, 4 * 3),
            i in 0usize..8,
            j in 0usize..12,
            incl in any::<bool>(),
        ) {
            let eval = |ap: &[f64], an: &[f64]| {
                let mut g = Graph::new();
                let a = g.constant(Tensor::new([4, 2], ap.to_vec()));
                let n = g.constant(Tensor::new([4, 3], an.to_vec()));
                let l = contrastive_from_scores(&mut g, a, n, 0.5, incl);
                g.value(l).item()
            };
            let base = eval(&ap, &an);
            let eps = 1e-4;
            let mut up = ap.clone();
            up[i] += eps;
            let mut down = ap.clone();
            down[i] -= eps;
            prop_assert!(eval(&up, &an) < base && base < eval(&down, &an));
            let mut up = an.clone();
            up[j] += eps;
            let mut down = an.clone();
            down[j] -= eps;
            prop_assert!(eval(&ap, &up) > base && base > eval(&ap, &down));
        }
    }
}
