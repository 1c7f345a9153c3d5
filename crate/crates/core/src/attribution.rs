// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution of a next-token decision to (token, feature) pairs.
//!
//! The influence of pair `(i, j)` is the change in the logit difference
//! `d = u[v_c] - u[v_b]` when feature `j` is clamped to zero on token `i`.
//! [`exact_attribution`] re-runs the completion once per pair;
//! [`approx_attribution`] uses one vector-Jacobian product and the linear
//! estimate `I(i, j) = -z_hat[i, j] * dd/dz[i, j]`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::host::{self, Activations, HostInput, HostModel, RangeKind, TokenRange};
use crate::sae::{self, LatentState, SaeParams};
use crate::store::{self, SparseFeatureCache};

/// `u[v_c] - u[v_b]`.
pub fn logit_diff(u: &[f64], v_c: usize, v_b: usize) -> Result<f64> {
    let n = u.len();
    match (u.get(v_c), u.get(v_b)) {
        (Some(a), Some(b)) => Ok(a - b),
        _ => Err(Error::invalid(format!(
            "token ids ({v_c}, {v_b}) out of range for {n} logits"
        ))),
    }
}

/// Logits with the chosen token (their argmax) and a baseline token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitView {
    pub u: Vec<f64>,
    pub v_c: usize,
    pub v_b: usize,
}

impl LogitView {
    pub fn new(u: Vec<f64>, v_b: usize) -> Result<Self> {
        if v_b >= u.len() {
            return Err(Error::invalid(format!("baseline id {v_b} out of range")));
        }
        let v_c = host::argmax(&u);
        if v_c == v_b {
            return Err(Error::invalid("baseline token is the argmax"));
        }
        Ok(Self { u, v_c, v_b })
    }

    pub fn diff(&self) -> f64 {
        self.u[self.v_c] - self.u[self.v_b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Approx,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Method::Exact),
            "approx" => Ok(Method::Approx),
            _ => Err(Error::invalid(format!("unknown attribution method {s:?}"))),
        }
    }
}

/// Modality of the token an entry belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeLabel {
    Image,
    Text,
}

impl From<&TokenRange> for RangeLabel {
    fn from(r: &TokenRange) -> Self {
        if r.is_image() {
            RangeLabel::Image
        } else {
            RangeLabel::Text
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionEntry {
    pub token: usize,
    pub feature: usize,
    pub influence: f64,
    pub range: RangeLabel,
    /// Exact runs only: ablation let a different feature into the top k.
    pub reselection: bool,
}

/// Influences keyed by `(token, feature)`, in key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: Method,
    pub v_c: usize,
    pub v_b: usize,
    /// `d(u)` of the unablated forward pass.
    pub baseline: f64,
    pub n_tokens: usize,
    pub ranges: Vec<TokenRange>,
    pub entries: Vec<AttributionEntry>,
}

impl AttributionResult {
    pub fn get(&self, token: usize, feature: usize) -> Option<&AttributionEntry> {
        self.entries
            .binary_search_by(|e| (e.token, e.feature).cmp(&(token, feature)))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// `sum_j I(i, j)` for every token.
    pub fn token_totals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_tokens];
        for e in &self.entries {
            out[e.token] += e.influence;
        }
        out
    }

    /// One JSON object per entry.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            token: usize,
            feature: usize,
            influence: f64,
            method: Method,
            range: &'a RangeLabel,
            reselection: bool,
        }
        for e in &self.entries {
            let line = Line {
                token: e.token,
                feature: e.feature,
                influence: e.influence,
                method: self.method,
                range: &e.range,
                reselection: e.reselection,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Which (token, feature) pairs an exact run ablates.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Scope {
    /// Every pair active in the unablated pass.
    #[default]
    Active,
    Pairs(Vec<(usize, usize)>),
}

struct Prepared {
    states: Vec<LatentState>,
    xhat: Activations,
    xhat_f64: Vec<f64>,
    ranges: Vec<TokenRange>,
    labels: Vec<RangeLabel>,
}

fn prepare(host: &dyn HostModel, input: &HostInput, params: &SaeParams) -> Result<Prepared> {
    host::check_sae_fits(host, params)?;
    let x = host.run(input)?;
    let ranges = host.token_ranges(input)?;
    let mut labels = vec![RangeLabel::Text; x.tokens];
    let mut covered = 0;
    for r in &ranges {
        if r.end > x.tokens || r.start > r.end {
            return Err(Error::Protocol(format!(
                "token range {}..{} exceeds {} tokens",
                r.start, r.end, x.tokens
            )));
        }
        labels[r.start..r.end].fill(r.into());
        covered += r.end - r.start;
    }
    if covered != x.tokens {
        return Err(Error::Protocol("token ranges do not partition the input".into()));
    }
    let mut xhat = Activations::zeros(x.tokens, x.d_l);
    let mut xhat_f64 = Vec::with_capacity(x.tokens * x.d_l);
    let mut states = Vec::with_capacity(x.tokens);
    for t in 0..x.tokens {
        let st = sae::encode(x.row(t), params)?;
        let row = sae::decode_f64(&st, params)?;
        xhat.row_mut(t).iter_mut().zip(&row).for_each(|(o, v)| *o = *v as f32);
        xhat_f64.extend(row);
        states.push(st);
    }
    Ok(Prepared {
        states,
        xhat,
        xhat_f64,
        ranges,
        labels,
    })
}

fn check_ids(host: &dyn HostModel, v_c: usize, v_b: usize) -> Result<()> {
    let v = host.vocab();
    if v_c >= v || v_b >= v {
        return Err(Error::invalid(format!(
            "token ids ({v_c}, {v_b}) out of vocabulary ({v})"
        )));
    }
    Ok(())
}

/// Zero-ablation patching: one extra completion per scope entry.
pub fn exact_attribution(
    host: &dyn HostModel,
    input: &HostInput,
    params: &SaeParams,
    v_c: usize,
    v_b: usize,
    scope: &Scope,
) -> Result<AttributionResult> {
    check_ids(host, v_c, v_b)?;
    let prep = prepare(host, input, params)?;
    let n = prep.states.len();
    let pairs: Vec<(usize, usize)> = match scope {
        Scope::Active => prep
            .states
            .iter()
            .enumerate()
            .flat_map(|(t, s)| s.active.iter().map(move |&j| (t, j)))
            .collect(),
        Scope::Pairs(p) => {
            let set: BTreeSet<(usize, usize)> = p.iter().copied().collect();
            for &(t, j) in &set {
                if t >= n || j >= params.d_sae() {
                    return Err(Error::invalid(format!("scope pair ({t}, {j}) out of range")));
                }
            }
            set.into_iter().collect()
        }
    };
    let base = logit_diff(&host.complete_f64(prep.states.len(), &prep.xhat_f64)?, v_c, v_b)?;
    let entries = pairs
        .par_iter()
        .map(|&(t, j)| -> Result<AttributionEntry> {
            let st = &prep.states[t];
            let ablated = sae::steer_many(&st.z_pre, &[(j, 0.0)], params.k())?;
            let expected: Vec<usize> = st.active.iter().copied().filter(|&a| a != j).collect();
            let reselection = ablated.active != expected;
            let mut xhat = prep.xhat_f64.clone();
            let d_l = params.d_model();
            xhat[t * d_l..(t + 1) * d_l].copy_from_slice(&sae::decode_f64(&ablated, params)?);
            let d = logit_diff(&host.complete_f64(n, &xhat)?, v_c, v_b)?;
            Ok(AttributionEntry {
                token: t,
                feature: j,
                influence: d - base,
                range: prep.labels[t],
                reselection,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttributionResult {
        method: Method::Exact,
        v_c,
        v_b,
        baseline: base,
        n_tokens: n,
        ranges: prep.ranges,
        entries,
    })
}

/// Linear estimate of every active pair's influence from one vjp.
pub fn approx_attribution(
    host: &dyn HostModel,
    input: &HostInput,
    params: &SaeParams,
    v_c: usize,
    v_b: usize,
) -> Result<AttributionResult> {
    check_ids(host, v_c, v_b)?;
    let prep = prepare(host, input, params)?;
    let base = logit_diff(&host.complete_f64(prep.states.len(), &prep.xhat_f64)?, v_c, v_b)?;
    let g = host.vjp(&prep.xhat, v_c, v_b)?;
    if g.tokens != prep.xhat.tokens || g.d_l != prep.xhat.d_l {
        return Err(Error::Protocol("vjp shape differs from its input".into()));
    }
    let mut entries = Vec::new();
    for (t, st) in prep.states.iter().enumerate() {
        let gz = sae::latent_gradient(g.row(t), params, &st.active)?;
        for (&j, &z) in st.active.iter().zip(&st.values) {
            entries.push(AttributionEntry {
                token: t,
                feature: j,
                influence: -(z as f64) * gz.get(j) as f64,
                range: prep.labels[t],
                reselection: false,
            });
        }
    }
    Ok(AttributionResult {
        method: Method::Approx,
        v_c,
        v_b,
        baseline: base,
        n_tokens: prep.states.len(),
        ranges: prep.ranges,
        entries,
    })
}

/// Per-range view: features ranked by total `|I|` and the per-token sum of
/// influences restricted to those features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeMap {
    pub range: TokenRange,
    pub label: RangeLabel,
    /// `(feature, sum |I|)`, descending, ties by feature id.
    pub ranking: Vec<(usize, f64)>,
    /// One value per token of the range (row-major grid for images).
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

/// Builds one [`RangeMap`] per token range of `result`.
pub fn attribution_maps(result: &AttributionResult, top_n: usize) -> Vec<RangeMap> {
    result
        .ranges
        .iter()
        .map(|r| {
            let mut totals: BTreeMap<usize, f64> = BTreeMap::new();
            for e in result.entries.iter().filter(|e| r.contains(e.token)) {
                *totals.entry(e.feature).or_default() += e.influence.abs();
            }
            let mut ranking: Vec<(usize, f64)> = totals.into_iter().collect();
            ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranking.truncate(top_n);
            let keep: BTreeSet<usize> = ranking.iter().map(|(j, _)| *j).collect();
            let mut values = vec![0.0; r.end - r.start];
            for e in result.entries.iter().filter(|e| r.contains(e.token)) {
                if keep.contains(&e.feature) {
                    values[e.token - r.start] += e.influence;
                }
            }
            let (rows, cols) = match r.kind {
                RangeKind::Image { rows, cols } => (rows as usize, cols as usize),
                RangeKind::Text => (1, r.end - r.start),
            };
            RangeMap {
                range: *r,
                label: r.into(),
                ranking,
                values,
                rows,
                cols,
            }
        })
        .collect()
}

/// Features ranked by mean activation on `image_id`, with the `skip` most
/// activated dropped and the next `k_top` returned.
pub fn probe_features(
    cache: &SparseFeatureCache,
    image_id: &str,
    k_top: usize,
    skip: usize,
) -> Result<Vec<(usize, f32)>> {
    if k_top < 1 {
        return Err(Error::invalid("k_top must be at least 1"));
    }
    let mut means = store::image_feature_means(cache, image_id)?;
    means.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(means.into_iter().skip(skip).take(k_top).collect())
}
