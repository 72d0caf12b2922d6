//! Assembly of the per-batch objectives on one tape.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::networks::{Ctx, Latent, Noise};
use crate::objectives::{
    compatibility_matrix, cvae_loss, discriminator_loss, reconstruction_loss, relation_loss, tc_estimate,
    Reduction,
};
use crate::tensor::{Graph, Scalar, Var};

/// Which features are passed through the disentangler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Streams {
    /// Real features `x` only.
    Real,
    /// cVAE reconstructions `x̂` only.
    Reconstructed,
    /// Both, with every disentangler term averaged over the two.
    #[default]
    Both,
}

impl Streams {
    pub fn count(self) -> usize {
        match self {
            Streams::Both => 2,
            _ => 1,
        }
    }
}

/// Tags a numeric failure with the loss term it happened in.
pub(crate) fn in_term<T>(term: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{term}: {op}"),
        },
        e => e,
    })
}

/// A stop-gradient copy of `v`.
pub(crate) fn detach<S: Scalar>(g: &mut Graph<S>, v: Var) -> Var {
    let t = g.value(v).clone();
    g.constant(t)
}

fn mean_of<S: Scalar>(g: &mut Graph<S>, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = g.add(acc, v)?;
    }
    if vs.len() == 1 {
        return Ok(acc);
    }
    g.scale(acc, 1.0 / vs.len() as f64)
}

/// Loss terms shared by both phases, with `overall1 = cvae + rec + λ1·rel`.
#[derive(Clone, Debug)]
pub struct Terms {
    pub cvae: Var,
    pub cvae_recon: Var,
    pub kl: Var,
    pub rec: Var,
    pub rel: Var,
    pub overall1: Var,
    /// Disentangler outputs, real stream first.
    pub latents: Vec<Latent>,
}

pub fn overall1_terms<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    batch: &Batch<S>,
    noise: Noise<'_, S>,
    relation_weight: f64,
    kl_weight: f64,
    streams: Streams,
    red: Reduction,
) -> Result<Terms> {
    let x = ctx.g.constant(batch.x.clone());
    let a = ctx.g.constant(batch.a.clone());
    let a_unique = ctx.g.constant(batch.a_unique.clone());
    let target = ctx.g.constant(compatibility_matrix(&batch.y, &batch.y_unique)?);

    let cvae = in_term("loss_cvae", cvae_loss(ctx, x, a, noise, kl_weight, red))?;
    let inputs: Vec<Var> = match streams {
        Streams::Real => vec![x],
        Streams::Reconstructed => vec![cvae.xhat],
        Streams::Both => vec![x, cvae.xhat],
    };
    let mut latents = Vec::new();
    let mut recs = Vec::new();
    let mut rels = Vec::new();
    for input in inputs {
        let lat = in_term("encode", ctx.encode_disentangle(input))?;
        let rec = in_term("loss_rec", (|| {
            let xbar = ctx.decode_disentangle(lat.h)?;
            reconstruction_loss(ctx.g, x, xbar, red)
        })())?;
        let rel = in_term("loss_rel", (|| {
            let scores = ctx.relate(lat.hs, a_unique)?;
            relation_loss(ctx.g, scores, target, red)
        })())?;
        latents.push(lat);
        recs.push(rec);
        rels.push(rel);
    }
    let rec = mean_of(ctx.g, &recs)?;
    let rel = mean_of(ctx.g, &rels)?;
    let overall1 = in_term("loss_overall", (|| {
        let s = ctx.g.add(cvae.loss, rec)?;
        let r = ctx.g.scale(rel, relation_weight)?;
        ctx.g.add(s, r)
    })())?;
    Ok(Terms {
        cvae: cvae.loss,
        cvae_recon: cvae.recon,
        kl: cvae.kl,
        rec,
        rel,
        overall1,
        latents,
    })
}

/// Mean total-correlation estimate over the streams. Gradients flow into the
/// producers of `h`; the caller decides whether the discriminator is tracked.
pub fn tc_term<S: Scalar>(ctx: &mut Ctx<'_, S>, latents: &[Latent]) -> Result<Var> {
    let mut tcs = Vec::new();
    for lat in latents {
        tcs.push(in_term("tc", tc_estimate(ctx, lat.h))?);
    }
    mean_of(ctx.g, &tcs)
}

/// `overall1 + w·tc`.
pub fn overall2<S: Scalar>(g: &mut Graph<S>, overall1: Var, tc: Var, tc_weight: f64) -> Result<Var> {
    let w = g.scale(tc, tc_weight)?;
    g.add(overall1, w)
}

/// Mean discriminator loss over the streams. Each stream is detached and
/// paired with its own permutation `(B′, B″)`, so only the discriminator
/// receives gradient.
pub fn dis_term<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    latents: &[Latent],
    perms: &[(Vec<usize>, Vec<usize>)],
) -> Result<Var> {
    let mut losses = Vec::new();
    for (lat, (p1, p2)) in latents.iter().zip(perms) {
        let l = in_term("loss_dis", (|| {
            let h = detach(ctx.g, lat.h);
            let hs = detach(ctx.g, lat.hs);
            let hn = detach(ctx.g, lat.hn);
            let hs_p = ctx.g.gather_rows(hs, p1)?;
            let hn_p = ctx.g.gather_rows(hn, p2)?;
            let h_perm = ctx.g.concat_cols(hs_p, hn_p)?;
            discriminator_loss(ctx, h, h_perm)
        })())?;
        losses.push(l);
    }
    mean_of(ctx.g, &losses)
}
