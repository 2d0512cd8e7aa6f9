//! Synthetic model graphs with FLOP and size annotations.
//!
//! All tensors are FP32. FLOP counts treat a multiply-add as two operations.

use thiserror::Error;

use crate::graph::{GraphBuilder, TaskGraph};

const F32: u64 = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model size: {0}")]
    InvalidSize(String),
    #[error("unsupported ResNet depth {0} (expected 50, 101 or 152)")]
    UnsupportedDepth(usize),
}

struct Emitter {
    b: GraphBuilder,
}

impl Emitter {
    fn param(&mut self, id: &str, elements: u64) {
        self.b.param(id, elements * F32);
    }

    fn op(&mut self, id: &str, op: &str, flops: f64, inputs: &[&str], out_bytes_per_sample: u64) -> String {
        let out = format!("{id}:out");
        self.b.value(&out, 0, out_bytes_per_sample);
        self.b.task(id, op, flops, inputs, &[&out]);
        out
    }

    /// `y = x W + b` applied to `rows` rows per sample.
    fn linear(&mut self, id: &str, x: &str, rows: u64, d_in: u64, d_out: u64) -> String {
        let w = format!("{id}.w");
        let bias = format!("{id}.b");
        self.param(&w, d_in * d_out);
        self.param(&bias, d_out);
        let flops = (2 * rows * d_in * d_out + rows * d_out) as f64;
        self.op(id, "linear", flops, &[x, &w, &bias], rows * d_out * F32)
    }

    fn layer_norm(&mut self, id: &str, x: &str, rows: u64, width: u64) -> String {
        let g = format!("{id}.gamma");
        let bias = format!("{id}.beta");
        self.param(&g, width);
        self.param(&bias, width);
        self.op(id, "layer_norm", (8 * rows * width) as f64, &[x, &g, &bias], rows * width * F32)
    }
}

/// Transformer encoder in the shape of BERT pre-training: embeddings,
/// `layers` encoder blocks and a masked-LM head whose vocabulary projection
/// reuses the word-embedding matrix through a transpose.
///
/// Parameters: `vocab*h + seq*h + 2h + 2h` (embeddings), `12h^2 + 13h` per
/// layer, `h^2 + 3h + vocab` in the head.
pub fn gen_bert_like(hidden: usize, layers: usize, seq_len: usize, vocab: usize) -> Result<TaskGraph, ModelError> {
    if hidden == 0 || layers == 0 || seq_len == 0 || vocab == 0 {
        return Err(ModelError::InvalidSize(format!(
            "hidden={hidden} layers={layers} seq_len={seq_len} vocab={vocab}; all must be positive"
        )));
    }
    let (h, s, v) = (hidden as u64, seq_len as u64, vocab as u64);
    let heads = (h / 64).max(1);
    let act = s * h * F32;
    let mut e = Emitter { b: GraphBuilder::new() };

    e.b.input("input_ids", s * F32);
    e.b.input("labels", s * F32);
    e.param("emb/word.w", v * h);
    e.param("emb/pos.w", s * h);
    e.param("emb/type.w", 2 * h);
    let tok = e.op("emb/lookup", "gather", (s * h) as f64, &["input_ids", "emb/word.w"], act);
    let pos = e.op("emb/add_pos", "add", (s * h) as f64, &[&tok, "emb/pos.w"], act);
    let typ = e.op("emb/add_type", "add", (s * h) as f64, &[&pos, "emb/type.w"], act);
    let mut x = e.layer_norm("emb/ln", &typ, s, h);

    for l in 0..layers {
        let p = format!("l{l:04}/");
        let q = e.linear(&format!("{p}q"), &x, s, h, h);
        let k = e.linear(&format!("{p}k"), &x, s, h, h);
        let val = e.linear(&format!("{p}v"), &x, s, h, h);
        let scores = e.op(
            &format!("{p}scores"),
            "batched_matmul",
            (2 * s * s * h) as f64,
            &[&q, &k],
            heads * s * s * F32,
        );
        let probs = e.op(&format!("{p}softmax"), "softmax", (5 * heads * s * s) as f64, &[&scores], heads * s * s * F32);
        let ctx = e.op(&format!("{p}context"), "batched_matmul", (2 * s * s * h) as f64, &[&probs, &val], act);
        let attn = e.linear(&format!("{p}attn_out"), &ctx, s, h, h);
        let r1 = e.op(&format!("{p}residual1"), "add", (s * h) as f64, &[&attn, &x], act);
        let y1 = e.layer_norm(&format!("{p}ln1"), &r1, s, h);
        let f1 = e.linear(&format!("{p}ffn_in"), &y1, s, h, 4 * h);
        let g1 = e.op(&format!("{p}gelu"), "gelu", (8 * s * 4 * h) as f64, &[&f1], 4 * act);
        let f2 = e.linear(&format!("{p}ffn_out"), &g1, s, 4 * h, h);
        let r2 = e.op(&format!("{p}residual2"), "add", (s * h) as f64, &[&f2, &y1], act);
        x = e.layer_norm(&format!("{p}ln2"), &r2, s, h);
    }

    let d = e.linear("head/dense", &x, s, h, h);
    let g = e.op("head/gelu", "gelu", (8 * s * h) as f64, &[&d], act);
    let t = e.layer_norm("head/ln", &g, s, h);
    e.b.value("head/word.wt", v * h * F32, 0);
    e.b.task("head/word_transpose", "transpose", 0.0, &["emb/word.w"], &["head/word.wt"]);
    e.param("head/decoder.b", v);
    let logits = e.op(
        "head/vocab_proj",
        "matmul",
        (2 * s * h * v + s * v) as f64,
        &[&t, "head/word.wt", "head/decoder.b"],
        s * v * F32,
    );
    let loss = e.op("head/loss", "softmax_xent", (5 * s * v) as f64, &[&logits, "labels"], F32);
    e.b.output(&loss);
    Ok(e.b.build().expect("generator emits consistent ids"))
}

fn resnet_stage_blocks(layers: usize) -> Result<[usize; 4], ModelError> {
    match layers {
        50 => Ok([3, 4, 6, 3]),
        101 => Ok([3, 4, 23, 3]),
        152 => Ok([3, 8, 36, 3]),
        other => Err(ModelError::UnsupportedDepth(other)),
    }
}

struct Conv<'a> {
    id: &'a str,
    x: &'a str,
    c_in: u64,
    c_out: u64,
    kernel: u64,
    out_hw: u64,
}

impl Emitter {
    fn conv(&mut self, c: Conv<'_>) -> String {
        let w = format!("{}.w", c.id);
        self.param(&w, c.kernel * c.kernel * c.c_in * c.c_out);
        let pixels = c.out_hw * c.out_hw;
        let flops = (2 * c.kernel * c.kernel * c.c_in * c.c_out * pixels) as f64;
        self.op(c.id, "conv2d", flops, &[c.x, &w], pixels * c.c_out * F32)
    }

    fn bn(&mut self, id: &str, x: &str, ch: u64, hw: u64, relu: bool) -> String {
        let g = format!("{id}.gamma");
        let bias = format!("{id}.beta");
        self.param(&g, ch);
        self.param(&bias, ch);
        let bytes = hw * hw * ch * F32;
        let y = self.op(id, "batch_norm", (4 * hw * hw * ch) as f64, &[x, &g, &bias], bytes);
        if relu {
            self.op(&format!("{id}_relu"), "relu", (hw * hw * ch) as f64, &[&y], bytes)
        } else {
            y
        }
    }
}

/// Bottleneck ResNet at 224x224 with every convolution's filter count scaled
/// by `width_factor`.
pub fn gen_resnet_like(layers: usize, width_factor: usize) -> Result<TaskGraph, ModelError> {
    let blocks = resnet_stage_blocks(layers)?;
    if width_factor == 0 {
        return Err(ModelError::InvalidSize("width factor must be positive".into()));
    }
    let w = width_factor as u64;
    let mut e = Emitter { b: GraphBuilder::new() };

    e.b.input("images", 3 * 224 * 224 * F32);
    e.b.input("labels", F32);
    let stem_c = 64 * w;
    let c = e.conv(Conv { id: "stem/conv", x: "images", c_in: 3, c_out: stem_c, kernel: 7, out_hw: 112 });
    let r = e.bn("stem/bn", &c, stem_c, 112, true);
    let mut x = e.op("stem/maxpool", "max_pool", (9 * 56 * 56 * stem_c) as f64, &[&r], 56 * 56 * stem_c * F32);

    let mut c_in = stem_c;
    let mut hw = 56u64;
    for (stage, &n) in blocks.iter().enumerate() {
        let mid = (64u64 << stage) * w;
        let c_out = 4 * mid;
        for j in 0..n {
            let p = format!("s{}b{j:02}/", stage + 1);
            let out_hw = if j == 0 && stage > 0 { hw / 2 } else { hw };
            let id = |s: &str| format!("{p}{s}");
            let c1 = e.conv(Conv { id: &id("conv1"), x: &x, c_in, c_out: mid, kernel: 1, out_hw: hw });
            let a1 = e.bn(&id("bn1"), &c1, mid, hw, true);
            let c2 = e.conv(Conv { id: &id("conv2"), x: &a1, c_in: mid, c_out: mid, kernel: 3, out_hw });
            let a2 = e.bn(&id("bn2"), &c2, mid, out_hw, true);
            let c3 = e.conv(Conv { id: &id("conv3"), x: &a2, c_in: mid, c_out, kernel: 1, out_hw });
            let a3 = e.bn(&id("bn3"), &c3, c_out, out_hw, false);
            let shortcut = if j == 0 {
                let d = e.conv(Conv { id: &id("down"), x: &x, c_in, c_out, kernel: 1, out_hw });
                e.bn(&id("down_bn"), &d, c_out, out_hw, false)
            } else {
                x.clone()
            };
            let bytes = out_hw * out_hw * c_out * F32;
            let sum = e.op(&id("add"), "add", (out_hw * out_hw * c_out) as f64, &[&a3, &shortcut], bytes);
            x = e.op(&id("relu"), "relu", (out_hw * out_hw * c_out) as f64, &[&sum], bytes);
            c_in = c_out;
            hw = out_hw;
        }
    }

    let pooled = e.op("fc/avgpool", "avg_pool", (hw * hw * c_in) as f64, &[&x], c_in * F32);
    let logits = e.linear("fc/linear", &pooled, 1, c_in, 1000);
    let loss = e.op("fc/loss", "softmax_xent", 5000.0, &[&logits, "labels"], F32);
    e.b.output(&loss);
    Ok(e.b.build().expect("generator emits consistent ids"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{count_params, validate_graph};

    fn param_elements_with_prefix(g: &TaskGraph, prefix: &str) -> u64 {
        g.value_indices()
            .filter(|&i| g.id(i).starts_with(prefix))
            .filter_map(|i| g.value(i))
            .filter(|v| v.is_param)
            .map(|v| v.fixed_bytes / F32)
            .sum()
    }

    #[test]
    fn bert_layer_matches_weight_table() {
        let h = 96u64;
        let g = gen_bert_like(h as usize, 1, 16, 100).unwrap();
        // (rows, cols) of every weight tensor in one encoder layer
        let table: [(u64, u64); 16] = [
            (h, h), (1, h), // query
            (h, h), (1, h), // key
            (h, h), (1, h), // value
            (h, h), (1, h), // attention output
            (1, h), (1, h), // ln1
            (h, 4 * h), (1, 4 * h),
            (4 * h, h), (1, h),
            (1, h), (1, h), // ln2
        ];
        let expected: u64 = table.iter().map(|(r, c)| r * c).sum();
        assert_eq!(param_elements_with_prefix(&g, "l0000/"), expected);
        assert_eq!(expected, 12 * h * h + 13 * h);
    }

    #[test]
    fn bert_params_monotone() {
        let p = |h, l| count_params(&gen_bert_like(h, l, 32, 500).unwrap(), 4).elements;
        assert!(p(64, 2) < p(64, 3));
        assert!(p(64, 2) < p(128, 2));
    }

    #[test]
    fn generated_graphs_are_valid() {
        assert!(validate_graph(&gen_bert_like(64, 2, 16, 50).unwrap()).is_empty());
        assert!(validate_graph(&gen_resnet_like(50, 1).unwrap()).is_empty());
    }

    #[test]
    fn resnet50_param_count() {
        let n = count_params(&gen_resnet_like(50, 1).unwrap(), 4).elements as f64;
        assert!((n / 25.6e6 - 1.0).abs() < 0.05, "{n}");
    }

    #[test]
    fn resnet_width_scales_convs_quadratically() {
        let conv = |w| {
            let g = gen_resnet_like(50, w).unwrap();
            g.value_indices()
                .filter(|&i| {
                    let id = g.id(i);
                    id.ends_with(".w") && !id.starts_with("fc/") && !id.starts_with("stem/")
                })
                .map(|i| g.value(i).unwrap().fixed_bytes)
                .sum::<u64>()
        };
        assert_eq!(conv(2), 4 * conv(1));
    }

    #[test]
    fn bad_sizes() {
        assert!(matches!(gen_resnet_like(34, 1), Err(ModelError::UnsupportedDepth(34))));
        assert!(gen_bert_like(1024, 0, 512, 30522).is_err());
    }
}
