//! Declarative CNN graph descriptions and their resolved form.
//!
//! A network spec is a TOML document: top-level metadata plus an ordered
//! `[[layer]]` list. Layers reference their producers by id; the pseudo-id
//! `input` denotes the network input. Channel counts of channel-preserving
//! layers and all output feature-map sizes are inferred once at load time.
//!
//! ```toml
//! name = "tiny"
//! input_shape = [3, 16, 16]
//! output_classes = 10
//!
//! [[layer]]
//! id = "c1"
//! kind = "conv2d"
//! c_out = 8
//! kx = 3
//! ky = 3
//! px = 1
//! py = 1
//! inputs = ["input"]
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    DwConv2d,
    Dense,
    Batchnorm,
    Relu,
    Maxpool,
    Avgpool,
    GlobalAvgpool,
    Add,
    Flatten,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::DwConv2d => "dw_conv2d",
            LayerKind::Dense => "dense",
            LayerKind::Batchnorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool => "maxpool",
            LayerKind::Avgpool => "avgpool",
            LayerKind::GlobalAvgpool => "global_avgpool",
            LayerKind::Add => "add",
            LayerKind::Flatten => "flatten",
        };
        f.write_str(s)
    }
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::DwConv2d)
    }

    /// Layers whose output channels are, index for index, the channels of
    /// their (first) input. They carry no searchable mask of their own.
    pub fn preserves_channels(self) -> bool {
        matches!(
            self,
            LayerKind::DwConv2d
                | LayerKind::Batchnorm
                | LayerKind::Relu
                | LayerKind::Maxpool
                | LayerKind::Avgpool
                | LayerKind::GlobalAvgpool
                | LayerKind::Add
                | LayerKind::Flatten
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_out: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ky: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sy: Option<usize>,
    #[serde(default)]
    pub px: usize,
    #[serde(default)]
    pub py: usize,
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_group: Option<String>,
    /// Set on exported architectures: the channel count this layer had in
    /// the seed, so live/seed ratios survive a round trip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_c_out: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
    pub output_classes: usize,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSpec>,
}

pub const INPUT_ID: &str = "input";

/// A layer with every free field pinned down.
#[derive(Debug, Clone)]
pub struct ResolvedLayer {
    pub spec: LayerSpec,
    pub kind: LayerKind,
    /// Indices into the layer list; `None` means the network input.
    pub input_idx: Vec<Option<usize>>,
    pub c_in: usize,
    pub c_out: usize,
    pub kx: usize,
    pub ky: usize,
    pub sx: usize,
    pub sy: usize,
    pub px: usize,
    pub py: usize,
    /// Output feature map, (height, width). 1x1 after global pooling,
    /// flatten and dense.
    pub out_h: usize,
    pub out_w: usize,
    /// Which mask group gates this layer's output channels, if any. Conv
    /// layers own one (explicit or synthesized); channel-preserving layers
    /// inherit their producer's; dense has none.
    pub mask_group: Option<String>,
}

/// A validated spec with shapes and mask-group inheritance worked out.
#[derive(Debug, Clone)]
pub struct ResolvedNet {
    pub spec: NetworkSpec,
    pub layers: Vec<ResolvedLayer>,
    /// Distinct mask group names in first-appearance order, with the group's
    /// channel count.
    pub groups: Vec<(String, usize)>,
}

impl ResolvedNet {
    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.spec.id == id)
    }

    pub fn output_layer(&self) -> &ResolvedLayer {
        self.layers.last().expect("resolved net has layers")
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|(g, _)| g == name)
    }
}

fn invalid(layer: &str, reason: impl Into<String>) -> Error {
    Error::InvalidSpec { layer: layer.into(), reason: reason.into() }
}

fn conv_out(extent: usize, pad: usize, k: usize, s: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / s + 1)
}

pub fn resolve(spec: &NetworkSpec) -> Result<ResolvedNet> {
    if spec.layers.is_empty() {
        return Err(invalid("<network>", "spec has no layers"));
    }
    if spec.input_shape.0 == 0 || spec.input_shape.1 == 0 || spec.input_shape.2 == 0 {
        return Err(invalid("<network>", "input_shape dimensions must be positive"));
    }
    if spec.output_classes == 0 {
        return Err(invalid("<network>", "output_classes must be positive"));
    }

    let mut by_id: HashMap<&str, usize> = HashMap::new();
    let mut layers: Vec<ResolvedLayer> = Vec::with_capacity(spec.layers.len());
    let mut groups: Vec<(String, usize)> = Vec::new();

    for (pos, ls) in spec.layers.iter().enumerate() {
        let id = ls.id.as_str();
        if id == INPUT_ID {
            return Err(invalid(id, "`input` is reserved for the network input"));
        }
        if by_id.contains_key(id) {
            return Err(invalid(id, "duplicate layer id"));
        }

        // Resolve producers; topological order means they must already exist.
        let mut input_idx = Vec::with_capacity(ls.inputs.len());
        for inp in &ls.inputs {
            if inp == INPUT_ID {
                input_idx.push(None);
            } else {
                match by_id.get(inp.as_str()) {
                    Some(&i) => input_idx.push(Some(i)),
                    None => {
                        return Err(invalid(
                            id,
                            format!("input `{inp}` not defined earlier (layers are topological)"),
                        ))
                    }
                }
            }
        }

        match ls.kind {
            LayerKind::Add => {
                if input_idx.len() < 2 {
                    return Err(invalid(id, "add needs at least two inputs"));
                }
            }
            _ => {
                if input_idx.len() != 1 {
                    return Err(invalid(
                        id,
                        format!("{} takes exactly one input, got {}", ls.kind, input_idx.len()),
                    ));
                }
            }
        }

        let in_shape = |ix: Option<usize>| -> (usize, usize, usize) {
            match ix {
                None => spec.input_shape,
                Some(i) => {
                    let l: &ResolvedLayer = &layers[i];
                    (l.c_out, l.out_h, l.out_w)
                }
            }
        };
        let (ic, ih, iw) = in_shape(input_idx[0]);

        if let Some(decl) = ls.c_in {
            if decl != ic && ls.kind != LayerKind::Dense && ls.kind != LayerKind::Flatten {
                return Err(invalid(
                    id,
                    format!("declared c_in {decl} but producer provides {ic} channels"),
                ));
            }
        }

        let need_kernel = || -> Result<(usize, usize)> {
            match (ls.kx, ls.ky) {
                (Some(x), Some(y)) if x > 0 && y > 0 => Ok((x, y)),
                _ => Err(invalid(id, format!("{} requires positive kx and ky", ls.kind))),
            }
        };

        let (c_in, c_out, kx, ky, sx, sy, px, py, out_h, out_w, mask_group): (
            usize,
            usize,
            usize,
            usize,
            usize,
            usize,
            usize,
            usize,
            usize,
            usize,
            Option<String>,
        );

        match ls.kind {
            LayerKind::Conv2d | LayerKind::DwConv2d => {
                let (kxv, kyv) = need_kernel()?;
                let sxv = ls.sx.unwrap_or(1);
                let syv = ls.sy.unwrap_or(1);
                if sxv == 0 || syv == 0 {
                    return Err(invalid(id, "stride must be positive"));
                }
                let co = match ls.kind {
                    LayerKind::DwConv2d => {
                        if let Some(decl) = ls.c_out {
                            if decl != ic {
                                return Err(invalid(
                                    id,
                                    format!("dw_conv2d needs c_out == c_in ({decl} != {ic})"),
                                ));
                            }
                        }
                        ic
                    }
                    _ => ls
                        .c_out
                        .ok_or_else(|| invalid(id, "conv2d requires c_out"))
                        .and_then(|c| {
                            if c == 0 {
                                Err(invalid(id, "c_out must be positive"))
                            } else {
                                Ok(c)
                            }
                        })?,
                };
                let oh = conv_out(ih, ls.py, kyv, syv);
                let ow = conv_out(iw, ls.px, kxv, sxv);
                let (oh, ow) = match (oh, ow) {
                    (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
                    _ => {
                        return Err(invalid(
                            id,
                            format!(
                                "non-positive output size for {ih}x{iw} input, kernel {kyv}x{kxv}, \
                                 stride {syv}x{sxv}, padding {}x{}",
                                ls.py, ls.px
                            ),
                        ))
                    }
                };
                let group = match ls.kind {
                    // every conv owns a group; a synthesized one when the
                    // spec names none (layer ids are unique, so this is too)
                    LayerKind::Conv2d => {
                        Some(ls.mask_group.clone().unwrap_or_else(|| format!("__{id}")))
                    }
                    // depthwise inherits its producer's mask
                    LayerKind::DwConv2d => {
                        if ls.mask_group.is_some() {
                            return Err(invalid(
                                id,
                                "dw_conv2d inherits its producer's mask; mask_group not allowed",
                            ));
                        }
                        inherited_group(&layers, input_idx[0])
                    }
                    _ => unreachable!(),
                };
                (c_in, c_out, kx, ky, sx, sy, px, py, out_h, out_w, mask_group) =
                    (ic, co, kxv, kyv, sxv, syv, ls.px, ls.py, oh, ow, group);
            }
            LayerKind::Dense => {
                if pos != spec.layers.len() - 1 {
                    return Err(invalid(id, "dense is only allowed as the final layer"));
                }
                let feats = ic * ih * iw;
                let co = ls.c_out.unwrap_or(spec.output_classes);
                if co != spec.output_classes {
                    return Err(invalid(
                        id,
                        format!("dense head c_out {co} != output_classes {}", spec.output_classes),
                    ));
                }
                (c_in, c_out, kx, ky, sx, sy, px, py, out_h, out_w, mask_group) =
                    (feats, co, 1, 1, 1, 1, 0, 0, 1, 1, None);
            }
            LayerKind::Batchnorm | LayerKind::Relu => {
                (c_in, c_out, kx, ky, sx, sy, px, py, out_h, out_w, mask_group) =
                    (ic, ic, 1, 1, 1, 1, 0, 0, ih, iw, inherited_group(&layers, input_idx[0]));
            }
            LayerKind::Maxpool | LayerKind::Avgpool => {
                let (kxv, kyv) = need_kernel()?;
                if ls.px != 0 || ls.py != 0 {
                    return Err(invalid(id, "pooling layers do not support padding"));
                }
                // pooling stride defaults to the kernel
                let sxv = ls.sx.unwrap_or(kxv);
                let syv = ls.sy.unwrap_or(kyv);
                if sxv == 0 || syv == 0 {
                    return Err(invalid(id, "stride must be positive"));
                }
                let oh = conv_out(ih, 0, kyv, syv);
                let ow = conv_out(iw, 0, kxv, sxv);
                let (oh, ow) = match (oh, ow) {
                    (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
                    _ => return Err(invalid(id, "non-positive pooled output size")),
                };
                (c_in, c_out, kx, ky, sx, sy, px, py, out_h, out_w, mask_group) =
                    (ic, ic, kxv, kyv, sxv, syv, 0, 0, oh, ow, inherited_group(&layers, input_idx[0]));
            }
            LayerKind::GlobalAvgpool => {
                (c_in, c_out, kx, ky, sx, sy, px, py, out_h, out_w, mask_group) =
                    (ic, ic, 1, 1, 1, 1, 0, 0, 1, 1, inherited_group(&layers, input_idx[0]));
            }
            LayerKind::Flatten => {
                let feats = ic * ih * iw;
                (c_in, c_out, kx, ky, sx, sy, px, py, out_h, out_w, mask_group) =
                    (feats, feats, 1, 1, 1, 1, 0, 0, 1, 1, inherited_group(&layers, input_idx[0]));
            }
            LayerKind::Add => {
                let first = in_shape(input_idx[0]);
                for &ix in &input_idx[1..] {
                    let other = in_shape(ix);
                    if other != first {
                        return Err(invalid(
                            id,
                            format!("add inputs disagree on shape: {first:?} vs {other:?}"),
                        ));
                    }
                }
                // shared mask group is the structural guarantee that every
                // sampled architecture keeps add shape-consistent
                let g0 = inherited_group(&layers, input_idx[0]);
                for &ix in &input_idx[1..] {
                    let gi = inherited_group(&layers, ix);
                    if gi != g0 {
                        return Err(invalid(
                            id,
                            format!(
                                "add inputs must share one mask_group, got {:?} and {:?}",
                                g0, gi
                            ),
                        ));
                    }
                }
                (c_in, c_out, kx, ky, sx, sy, px, py, out_h, out_w, mask_group) =
                    (first.0, first.0, 1, 1, 1, 1, 0, 0, first.1, first.2, g0);
            }
        }

        if let Some(g) = &mask_group {
            match groups.iter().find(|(name, _)| name == g) {
                Some((_, c)) => {
                    // only the owning conv layers pin the group width
                    if ls.kind == LayerKind::Conv2d && *c != c_out {
                        return Err(invalid(
                            id,
                            format!("mask_group `{g}` spans c_out {c} and {c_out}"),
                        ));
                    }
                }
                None => groups.push((g.clone(), c_out)),
            }
        }

        by_id.insert(id, pos);
        layers.push(ResolvedLayer {
            spec: ls.clone(),
            kind: ls.kind,
            input_idx,
            c_in,
            c_out,
            kx,
            ky,
            sx,
            sy,
            px,
            py,
            out_h,
            out_w,
            mask_group,
        });
    }

    Ok(ResolvedNet { spec: spec.clone(), layers, groups })
}

fn inherited_group(layers: &[ResolvedLayer], ix: Option<usize>) -> Option<String> {
    match ix {
        None => None,
        Some(i) => layers[i].mask_group.clone(),
    }
}

pub fn load_network_spec(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_network_spec(&text)
}

pub fn parse_network_spec(text: &str) -> Result<NetworkSpec> {
    toml::from_str(text).map_err(|e| Error::SpecParse(e.to_string()))
}

pub fn spec_to_toml(spec: &NetworkSpec) -> String {
    toml::to_string_pretty(spec).expect("network spec serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_spec() -> NetworkSpec {
        parse_network_spec(
            r#"
            name = "chain"
            input_shape = [3, 8, 8]
            output_classes = 4

            [[layer]]
            id = "c1"
            kind = "conv2d"
            c_out = 8
            kx = 3
            ky = 3
            px = 1
            py = 1
            inputs = ["input"]

            [[layer]]
            id = "r1"
            kind = "relu"
            inputs = ["c1"]

            [[layer]]
            id = "c2"
            kind = "conv2d"
            c_out = 4
            kx = 3
            ky = 3
            sx = 2
            sy = 2
            px = 1
            py = 1
            inputs = ["r1"]

            [[layer]]
            id = "gap"
            kind = "global_avgpool"
            inputs = ["c2"]

            [[layer]]
            id = "fc"
            kind = "dense"
            inputs = ["gap"]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn shapes_resolve_along_the_chain() {
        let net = resolve(&chain_spec()).unwrap();
        let c1 = &net.layers[0];
        assert_eq!((c1.c_in, c1.c_out, c1.out_h, c1.out_w), (3, 8, 8, 8));
        let c2 = &net.layers[2];
        assert_eq!((c2.c_in, c2.c_out, c2.out_h, c2.out_w), (8, 4, 4, 4));
        let fc = net.output_layer();
        assert_eq!((fc.c_in, fc.c_out), (4, 4));
    }

    #[test]
    fn relu_inherits_its_producers_mask_group() {
        let net = resolve(&chain_spec()).unwrap();
        assert_eq!(net.layers[1].mask_group, net.layers[0].mask_group);
        assert!(net.layers[0].mask_group.is_some());
        assert!(net.output_layer().mask_group.is_none());
    }

    #[test]
    fn forward_reference_is_rejected() {
        let spec = parse_network_spec(
            r#"
            name = "bad"
            input_shape = [1, 4, 4]
            output_classes = 2
            [[layer]]
            id = "c1"
            kind = "conv2d"
            c_out = 2
            kx = 1
            ky = 1
            inputs = ["missing"]
            "#,
        )
        .unwrap();
        let err = resolve(&spec).unwrap_err().to_string();
        assert!(err.contains("c1") && err.contains("missing"), "{err}");
    }

    #[test]
    fn dw_conv_must_preserve_channels() {
        let spec = parse_network_spec(
            r#"
            name = "bad"
            input_shape = [4, 4, 4]
            output_classes = 2
            [[layer]]
            id = "d1"
            kind = "dw_conv2d"
            c_out = 8
            kx = 3
            ky = 3
            px = 1
            py = 1
            inputs = ["input"]
            "#,
        )
        .unwrap();
        let err = resolve(&spec).unwrap_err().to_string();
        assert!(err.contains("d1") && err.contains("c_out == c_in"), "{err}");
    }

    #[test]
    fn add_requires_shared_mask_group() {
        let text = |with_groups: bool| {
            let g = if with_groups { "mask_group = \"j\"\n" } else { "" };
            format!(
                r#"
                name = "res"
                input_shape = [2, 4, 4]
                output_classes = 2
                [[layer]]
                id = "a"
                kind = "conv2d"
                c_out = 4
                kx = 1
                ky = 1
                inputs = ["input"]
                {g}
                [[layer]]
                id = "b"
                kind = "conv2d"
                c_out = 4
                kx = 1
                ky = 1
                inputs = ["input"]
                {g}
                [[layer]]
                id = "j"
                kind = "add"
                inputs = ["a", "b"]

                [[layer]]
                id = "gap"
                kind = "global_avgpool"
                inputs = ["j"]

                [[layer]]
                id = "fc"
                kind = "dense"
                inputs = ["gap"]
                "#
            )
        };
        let good = parse_network_spec(&text(true)).unwrap();
        assert!(resolve(&good).is_ok());
        let bad = parse_network_spec(&text(false)).unwrap();
        let err = resolve(&bad).unwrap_err().to_string();
        assert!(err.contains("share one mask_group"), "{err}");
    }

    #[test]
    fn non_positive_output_size_is_an_error() {
        let spec = parse_network_spec(
            r#"
            name = "bad"
            input_shape = [1, 2, 2]
            output_classes = 2
            [[layer]]
            id = "c1"
            kind = "conv2d"
            c_out = 2
            kx = 5
            ky = 5
            inputs = ["input"]
            "#,
        )
        .unwrap();
        let err = resolve(&spec).unwrap_err().to_string();
        assert!(err.contains("non-positive output size"), "{err}");
    }

    #[test]
    fn malformed_field_is_reported_by_name() {
        let err = parse_network_spec(
            r#"
            name = "bad"
            input_shape = [1, 4, 4]
            output_classes = 2
            [[layer]]
            id = "c1"
            kind = "conv2d"
            c_out = "eight"
            kx = 1
            ky = 1
            inputs = ["input"]
            "#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("c_out"), "{err}");
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let err = parse_network_spec(
            r#"
            name = "bad"
            input_shape = [1, 4, 4]
            output_classes = 2
            [[layer]]
            id = "c1"
            kind = "transposed_conv"
            inputs = ["input"]
            "#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("transposed_conv") || err.contains("kind"), "{err}");
    }
}
