use super::{infer_shapes, parse_spec, ArchSpec, NodeSpec, Normalization, Op, Result, SPEC_VERSION};

/// The shipped reference classifier (single-channel 300x300 input, two classes).
pub const REFERENCE_SPEC_JSON: &str = include_str!("../../specs/celldefectnet.json");

pub fn reference_spec() -> ArchSpec {
    parse_spec(REFERENCE_SPEC_JSON).expect("shipped reference spec is valid")
}

/// Incremental spec construction with generated node ids. Every method
/// returns the id of the node it added.
#[derive(Debug, Clone)]
pub struct ArchBuilder {
    spec: ArchSpec,
    counter: usize,
    column: Option<String>,
}

impl ArchBuilder {
    pub fn new(name: &str, input_shape: [usize; 4]) -> Self {
        Self {
            spec: ArchSpec {
                version: SPEC_VERSION,
                name: name.to_owned(),
                input_shape,
                normalization: Normalization::default(),
                nodes: Vec::new(),
                meta: Default::default(),
            },
            counter: 0,
            column: None,
        }
    }

    pub fn normalization(&mut self, n: Normalization) -> &mut Self {
        self.spec.normalization = n;
        self
    }

    pub fn meta(&mut self, key: &str, value: serde_json::Value) -> &mut Self {
        self.spec.meta.insert(key.to_owned(), value);
        self
    }

    /// Column label attached to subsequently added nodes (also used as an id prefix).
    pub fn column(&mut self, label: Option<&str>) -> &mut Self {
        self.column = label.map(str::to_owned);
        self
    }

    pub fn push(&mut self, op: Op, inputs: &[&str]) -> String {
        let id = match (&op, &self.column) {
            (Op::Input, _) => "input".to_owned(),
            (Op::Output, _) => "output".to_owned(),
            (_, Some(col)) => format!("{col}/{}{}", op.kind(), self.counter),
            (_, None) => format!("{}{}", op.kind(), self.counter),
        };
        self.counter += 1;
        self.spec.nodes.push(NodeSpec {
            id: id.clone(),
            op,
            inputs: inputs.iter().map(|s| (*s).to_owned()).collect(),
            column: self.column.clone(),
        });
        id
    }

    pub fn input(&mut self) -> String {
        self.push(Op::Input, &[])
    }

    pub fn conv(&mut self, x: &str, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> String {
        self.push(
            Op::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                bias: true,
            },
            &[x],
        )
    }

    /// Depthwise convolution with "same" padding.
    pub fn depthwise(&mut self, x: &str, kernel: usize, stride: usize) -> String {
        self.push(
            Op::DepthwiseConv {
                kernel,
                stride,
                padding: kernel / 2,
                bias: true,
            },
            &[x],
        )
    }

    pub fn pointwise(&mut self, x: &str, out_channels: usize) -> String {
        self.pointwise_strided(x, out_channels, 1)
    }

    pub fn pointwise_strided(&mut self, x: &str, out_channels: usize, stride: usize) -> String {
        self.push(
            Op::PointwiseConv {
                out_channels,
                stride,
                bias: true,
            },
            &[x],
        )
    }

    pub fn vac(&mut self, x: &str, mid_channels: usize, condense_stride: usize) -> String {
        self.push(
            Op::Vac {
                condense_kernel: condense_stride,
                condense_stride,
                mid_channels,
                embed_kernel: 3,
            },
            &[x],
        )
    }

    pub fn aads(&mut self, x: &str, stride: usize) -> String {
        self.push(Op::Aads { blur_size: 3, stride }, &[x])
    }

    pub fn maxpool(&mut self, x: &str, kernel: usize, stride: usize) -> String {
        self.push(Op::Maxpool { kernel, stride }, &[x])
    }

    pub fn relu(&mut self, x: &str) -> String {
        self.push(Op::Relu, &[x])
    }

    pub fn batchnorm(&mut self, x: &str) -> String {
        self.push(Op::Batchnorm, &[x])
    }

    pub fn gap(&mut self, x: &str) -> String {
        self.push(Op::Gap, &[x])
    }

    pub fn fc(&mut self, x: &str, out_features: usize) -> String {
        self.push(Op::Fc { out_features, bias: true }, &[x])
    }

    pub fn concat(&mut self, xs: &[&str]) -> String {
        self.push(Op::Concat, xs)
    }

    pub fn output(&mut self, x: &str) -> String {
        self.push(Op::Output, &[x])
    }

    /// Depthwise 3x3, pointwise projection, ReLU.
    pub fn separable(&mut self, x: &str, out_channels: usize) -> String {
        let d = self.depthwise(x, 3, 1);
        let p = self.pointwise(&d, out_channels);
        self.relu(&p)
    }

    /// Validates structure and shapes and returns the spec.
    pub fn build(self) -> Result<ArchSpec> {
        infer_shapes(&self.spec)?;
        Ok(self.spec)
    }

    /// The spec as built so far, unvalidated.
    pub fn peek(&self) -> &ArchSpec {
        &self.spec
    }
}

/// Layout of the reference classifier: a full-resolution stem, four
/// independent attention-condenser columns, pairwise merges, a full merge,
/// and a narrowing separable tail. Every spatial reduction is an AADS block.
pub fn reference_layout(widths: &ReferenceWidths) -> Result<ArchSpec> {
    let mut b = ArchBuilder::new("celldefectnet", [1, 1, 300, 300]);
    let x = b.input();
    b.column(Some("stem"));
    let stem = b.conv(&x, widths.stem, 3, 1, 1);
    let stem = b.relu(&stem);
    let stem = b.aads(&stem, 2);

    let mut columns = Vec::new();
    for c in 0..4 {
        let label = format!("col{}", c + 1);
        b.column(Some(&label));
        let v = b.vac(&stem, widths.stem / 3, 2);
        let s = b.separable(&v, widths.column);
        columns.push(b.aads(&s, 2));
    }
    let mut merged = Vec::new();
    for (pair, label) in columns.chunks(2).zip(["merge_a", "merge_b"]) {
        b.column(Some(label));
        let cat = b.concat(&[&pair[0], &pair[1]]);
        let v = b.vac(&cat, widths.column / 2, 2);
        merged.push(b.separable(&v, widths.merge));
    }
    b.column(Some("tail"));
    let cat = b.concat(&[&merged[0], &merged[1]]);
    let mut t = b.aads(&cat, 2);
    for stage in &widths.tail {
        t = b.aads(&t, 2);
        for &w in stage {
            t = b.separable(&t, w);
        }
    }
    let g = b.gap(&t);
    b.column(None);
    let f = b.fc(&g, 2);
    b.output(&f);
    b.build()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceWidths {
    pub stem: usize,
    pub column: usize,
    pub merge: usize,
    /// Separable block widths per tail stage; each stage starts with a
    /// stride-2 AADS.
    pub tail: Vec<Vec<usize>>,
}

impl Default for ReferenceWidths {
    fn default() -> Self {
        Self {
            stem: 12,
            column: 16,
            merge: 64,
            tail: vec![vec![256], vec![256, 256], vec![256, 256, 256]],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{count_macs, count_params};
    use super::*;

    #[test]
    fn shipped_spec_matches_layout() {
        let built = reference_layout(&ReferenceWidths::default()).unwrap();
        if std::env::var_os("CELLDEFECT_WRITE_REFERENCE").is_some() {
            let path = concat!(env!("CARGO_MANIFEST_DIR"), "/specs/celldefectnet.json");
            std::fs::write(path, built.to_json()).unwrap();
        }
        println!("params {} macs {}", count_params(&built).unwrap(), count_macs(&built).unwrap());
        assert_eq!(built.to_json(), REFERENCE_SPEC_JSON);
    }
}
