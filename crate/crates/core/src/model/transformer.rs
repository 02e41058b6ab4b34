//! Pre-norm transformer over trajectory tokens `[B, T, model_dim]`.

use super::{linear, Bound, Builder, Cond, Conditioning, Init, NetConfig};
use crate::error::Result;
use crate::ndauto::{NodeId, Tape, NORM_EPS};

pub(super) fn layout(b: &mut Builder, c: &NetConfig) {
    let m = c.model_dim;
    b.linear("tok", c.state_dim, m, false);
    b.add("pos".into(), vec![c.horizon, m], Init::Normal);
    b.linear("temb", c.time_embed_dim, m, false);
    if c.conditioning == Conditioning::Direct {
        b.linear("ctok", c.state_dim, m, false);
        b.add("cpos".into(), vec![2, m], Init::Normal);
    }
    for l in 0..c.layers {
        let p = format!("block{l}");
        b.norm(&format!("{p}.ln0"), m);
        for proj in ["q", "k", "v", "o"] {
            b.linear(&format!("{p}.{proj}"), m, m, false);
        }
        b.norm(&format!("{p}.ln1"), m);
        b.linear(&format!("{p}.mlp0"), m, 4 * m, false);
        b.linear(&format!("{p}.mlp1"), 4 * m, m, false);
    }
    b.norm("out.ln", m);
    b.linear("out.proj", m, c.state_dim, true);
}

fn layer_norm(tape: &mut Tape, bound: &Bound, name: &str, x: NodeId) -> Result<NodeId> {
    tape.layer_norm(
        x,
        bound.id(&format!("{name}.gamma")),
        bound.id(&format!("{name}.beta")),
        NORM_EPS,
    )
}

fn self_attention(
    c: &NetConfig,
    tape: &mut Tape,
    bound: &Bound,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let [bsz, t, m] = tape.value(x).shape()[..] else {
        unreachable!()
    };
    let (h, dh) = (c.heads, m / c.heads);
    let mut heads = [0; 3];
    for (slot, proj) in heads.iter_mut().zip(["q", "k", "v"]) {
        let p = linear(tape, bound, &format!("{name}.{proj}"), x)?;
        let p = tape.reshape(p, &[bsz, t, h, dh])?;
        let p = tape.permute(p, &[0, 2, 1, 3])?;
        *slot = tape.reshape(p, &[bsz * h, t, dh])?;
    }
    let a = tape.attention(heads[0], heads[1], heads[2])?;
    let a = tape.reshape(a, &[bsz, h, t, dh])?;
    let a = tape.permute(a, &[0, 2, 1, 3])?;
    let a = tape.reshape(a, &[bsz, t, m])?;
    linear(tape, bound, &format!("{name}.o"), a)
}

/// Broadcasts a `[B, M]` row to every one of `t` tokens.
fn per_token(tape: &mut Tape, row: NodeId, t: usize) -> Result<NodeId> {
    let [bsz, m] = tape.value(row).shape()[..] else {
        unreachable!()
    };
    let r = tape.reshape(row, &[bsz, 1, m])?;
    tape.expand(r, 1, t)
}

pub(super) fn forward(
    c: &NetConfig,
    tape: &mut Tape,
    bound: &Bound,
    x: NodeId,
    emb: NodeId,
    cond: Option<Cond<'_>>,
) -> Result<NodeId> {
    let [bsz, t, _] = tape.value(x).shape()[..] else {
        unreachable!()
    };
    let m = c.model_dim;
    let tok = linear(tape, bound, "tok", x)?;
    // shorter trajectories use a prefix of the positional table
    let pos = tape.slice(bound.id("pos"), 0, 0, t)?;
    let pos = tape.reshape(pos, &[1, t, m])?;
    let pos = tape.expand(pos, 0, bsz)?;
    let temb = linear(tape, bound, "temb", emb)?;
    let mut h = tape.add(tok, pos)?;
    let tt = per_token(tape, temb, t)?;
    h = tape.add(h, tt)?;
    let n_cond = if let Some(cd) = cond {
        let mut toks = Vec::with_capacity(3);
        for (i, state) in [cd.start, cd.goal].into_iter().enumerate() {
            let s = tape.constant(state.clone());
            let ct = linear(tape, bound, "ctok", s)?;
            let cp = tape.slice(bound.id("cpos"), 0, i, 1)?;
            let cp = tape.expand(cp, 0, bsz)?;
            let ct = tape.add(ct, cp)?;
            let ct = tape.add(ct, temb)?;
            toks.push(tape.reshape(ct, &[bsz, 1, m])?);
        }
        toks.push(h);
        h = tape.concat(&toks, 1)?;
        2
    } else {
        0
    };
    for l in 0..c.layers {
        let p = format!("block{l}");
        let a = layer_norm(tape, bound, &format!("{p}.ln0"), h)?;
        let a = self_attention(c, tape, bound, &p, a)?;
        h = tape.add(h, a)?;
        let f = layer_norm(tape, bound, &format!("{p}.ln1"), h)?;
        let f = linear(tape, bound, &format!("{p}.mlp0"), f)?;
        let f = tape.gelu(f);
        let f = linear(tape, bound, &format!("{p}.mlp1"), f)?;
        h = tape.add(h, f)?;
    }
    h = layer_norm(tape, bound, "out.ln", h)?;
    h = linear(tape, bound, "out.proj", h)?;
    if n_cond > 0 {
        h = tape.slice(h, 1, n_cond, t)?;
    }
    Ok(h)
}
