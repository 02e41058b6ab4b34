//! Residual temporal-convolution UNet over `[B, C, T]` feature maps.

use super::{linear, norm_groups, Bound, Builder, NetConfig};
use crate::error::Result;
use crate::ndauto::{NodeId, Tape, NORM_EPS};

fn res_layout(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, emb: usize) {
    b.conv(&format!("{name}.conv0"), cin, cout, k, false);
    b.norm(&format!("{name}.norm0"), cout);
    b.linear(&format!("{name}.film"), emb, 2 * cout, false);
    b.conv(&format!("{name}.conv1"), cout, cout, k, false);
    b.norm(&format!("{name}.norm1"), cout);
    if cin != cout {
        b.conv(&format!("{name}.skip"), cin, cout, 1, false);
    }
}

pub(super) fn layout(b: &mut Builder, c: &NetConfig) {
    let k = c.kernel_size;
    let e = c.time_embed_dim;
    let dims = &c.channel_dims;
    let levels = dims.len();
    let mut cin = c.state_dim;
    for (i, &cout) in dims.iter().enumerate() {
        res_layout(b, &format!("down{i}.res0"), cin, cout, k, e);
        res_layout(b, &format!("down{i}.res1"), cout, cout, k, e);
        if i + 1 < levels {
            b.conv(&format!("down{i}.down"), cout, cout, 3, false);
        }
        cin = cout;
    }
    let deepest = dims[levels - 1];
    res_layout(b, "mid.res0", deepest, deepest, k, e);
    res_layout(b, "mid.res1", deepest, deepest, k, e);
    for i in (0..levels).rev() {
        let below = if i > 0 { dims[i - 1] } else { dims[0] };
        res_layout(b, &format!("up{i}.res0"), 2 * dims[i], below, k, e);
        res_layout(b, &format!("up{i}.res1"), below, below, k, e);
        if i > 0 {
            b.conv(&format!("up{i}.up"), below, below, 3, false);
        }
    }
    b.conv("out.conv", dims[0], dims[0], k, false);
    b.norm("out.norm", dims[0]);
    b.conv("out.proj", dims[0], c.state_dim, 1, true);
}

fn conv(tape: &mut Tape, bound: &Bound, name: &str, x: NodeId, stride: usize) -> Result<NodeId> {
    let w = bound.id(&format!("{name}.w"));
    let k = tape.value(w).shape()[2];
    tape.conv1d(x, w, bound.id(&format!("{name}.b")), stride, (k - 1) / 2)
}

fn conv_norm_act(
    tape: &mut Tape,
    bound: &Bound,
    conv_name: &str,
    norm_name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let h = conv(tape, bound, conv_name, x, 1)?;
    let c = tape.value(h).shape()[1];
    let h = tape.group_norm(
        h,
        norm_groups(c),
        bound.id(&format!("{norm_name}.gamma")),
        bound.id(&format!("{norm_name}.beta")),
        NORM_EPS,
    )?;
    Ok(tape.silu(h))
}

/// `[conv → norm → SiLU] → FiLM → [conv → norm → SiLU]` plus a residual path.
fn res_block(tape: &mut Tape, bound: &Bound, name: &str, x: NodeId, emb: NodeId) -> Result<NodeId> {
    let h = conv_norm_act(
        tape,
        bound,
        &format!("{name}.conv0"),
        &format!("{name}.norm0"),
        x,
    )?;
    let [bsz, c, t] = tape.value(h).shape()[..] else {
        unreachable!()
    };
    let e = tape.silu(emb);
    let film = linear(tape, bound, &format!("{name}.film"), e)?;
    let film = tape.reshape(film, &[bsz, 2 * c, 1])?;
    let scale = tape.slice(film, 1, 0, c)?;
    let scale = tape.add_scalar(scale, 1.0);
    let shift = tape.slice(film, 1, c, c)?;
    let scale = tape.expand(scale, 2, t)?;
    let shift = tape.expand(shift, 2, t)?;
    let h = tape.mul(h, scale)?;
    let h = tape.add(h, shift)?;
    let h = conv_norm_act(
        tape,
        bound,
        &format!("{name}.conv1"),
        &format!("{name}.norm1"),
        h,
    )?;
    let skip_name = format!("{name}.skip");
    let res = if bound.has(&format!("{skip_name}.w")) {
        conv(tape, bound, &skip_name, x, 1)?
    } else {
        x
    };
    tape.add(h, res)
}

pub(super) fn forward(
    c: &NetConfig,
    tape: &mut Tape,
    bound: &Bound,
    x: NodeId,
    emb: NodeId,
) -> Result<NodeId> {
    let levels = c.channel_dims.len();
    let mut h = tape.permute(x, &[0, 2, 1])?;
    let mut skips = Vec::with_capacity(levels);
    for i in 0..levels {
        h = res_block(tape, bound, &format!("down{i}.res0"), h, emb)?;
        h = res_block(tape, bound, &format!("down{i}.res1"), h, emb)?;
        skips.push(h);
        if i + 1 < levels {
            h = conv(tape, bound, &format!("down{i}.down"), h, 2)?;
        }
    }
    h = res_block(tape, bound, "mid.res0", h, emb)?;
    h = res_block(tape, bound, "mid.res1", h, emb)?;
    for i in (0..levels).rev() {
        let skip = skips.pop().expect("one skip per level");
        h = tape.concat(&[h, skip], 1)?;
        h = res_block(tape, bound, &format!("up{i}.res0"), h, emb)?;
        h = res_block(tape, bound, &format!("up{i}.res1"), h, emb)?;
        if i > 0 {
            h = tape.upsample2(h)?;
            h = conv(tape, bound, &format!("up{i}.up"), h, 1)?;
        }
    }
    h = conv_norm_act(tape, bound, "out.conv", "out.norm", h)?;
    h = conv(tape, bound, "out.proj", h, 1)?;
    tape.permute(h, &[0, 2, 1])
}
