//! Checkpoint text format, version header `VALP/1`.
//!
//! Grammar (one directive per line, tokens space-separated, `#` comments
//! and blank lines ignored):
//!
//! ```text
//! VALP/1
//! input <id> dim <n> role <text...>
//! output <id> dim <n> kind <classification|regression|sampling> terminal <act>
//! loss <output-id> <cross_entropy|mse|recon_kl>
//! net <id> layers <count> sampler <k|->
//! layer <activation> <in> <out>      # repeated <count> times, followed by
//! w <hex>{out}                       #   <in> weight rows and
//! b <hex>{out}                       #   one bias row
//! arc <src> <dst>
//! training batch_size <n> seed <u64>
//! optimizer <output-id> sgd lr <hex>
//! optimizer <output-id> momentum lr <hex> beta <hex>
//! optimizer <output-id> adam lr <hex> beta1 <hex> beta2 <hex> eps <hex>
//! end
//! ```
//!
//! Every real is the 16-digit hex of its IEEE-754 bit pattern, so a
//! serialize/deserialize round trip is bit-exact. Deserialization runs
//! [`ModelGraph::validate`] and rejects structurally invalid models.

use super::{
    GraphArc, InputId, InputNode, ModelGraph, NetId, OutputId, OutputKind, OutputNode, SinkId,
    SourceId, SubNetwork, TrainingConfig, Violation,
};
use crate::nn::{Activation, DenseLayer, LossKind, Matrix, OptimizerKind, OptimizerSpec};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("model fails validation: {0:?}")]
    Invalid(Vec<Violation>),
}

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unhex(s: &str, line: usize) -> Result<f64, ParseError> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| ParseError::Syntax {
            line,
            message: format!("bad hex real '{s}'"),
        })
}

/// Render a model as checkpoint text.
pub fn serialize(model: &ModelGraph) -> String {
    let mut s = String::new();
    s.push_str("VALP/1\n");
    for inp in model.inputs.values() {
        let _ = writeln!(s, "input {} dim {} role {}", inp.id, inp.feature_dim, inp.role);
    }
    for out in model.outputs.values() {
        let _ = writeln!(
            s,
            "output {} dim {} kind {} terminal {}",
            out.id,
            out.target_dim,
            out.kind.name(),
            out.terminal.name()
        );
    }
    for (o, kind) in &model.losses {
        let _ = writeln!(s, "loss {} {}", o, kind.name());
    }
    for net in model.nets.values() {
        let sampler = net
            .sampler
            .map_or_else(|| "-".to_string(), |k| k.to_string());
        let _ = writeln!(s, "net {} layers {} sampler {}", net.id, net.layers.len(), sampler);
        for layer in &net.layers {
            let _ = writeln!(
                s,
                "layer {} {} {}",
                layer.activation.name(),
                layer.in_dim(),
                layer.out_dim()
            );
            for r in 0..layer.weights.rows() {
                s.push('w');
                for &v in layer.weights.row(r) {
                    s.push(' ');
                    s.push_str(&hex(v));
                }
                s.push('\n');
            }
            s.push('b');
            for &v in &layer.bias {
                s.push(' ');
                s.push_str(&hex(v));
            }
            s.push('\n');
        }
    }
    for arc in &model.arcs {
        let _ = writeln!(s, "arc {} {}", arc.from, arc.to);
    }
    let _ = writeln!(
        s,
        "training batch_size {} seed {}",
        model.training.batch_size, model.training.seed
    );
    for (o, spec) in &model.training.optimizers {
        match spec.kind {
            OptimizerKind::Sgd => {
                let _ = writeln!(s, "optimizer {} sgd lr {}", o, hex(spec.learning_rate));
            }
            OptimizerKind::Momentum { beta } => {
                let _ = writeln!(
                    s,
                    "optimizer {} momentum lr {} beta {}",
                    o,
                    hex(spec.learning_rate),
                    hex(beta)
                );
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let _ = writeln!(
                    s,
                    "optimizer {} adam lr {} beta1 {} beta2 {} eps {}",
                    o,
                    hex(spec.learning_rate),
                    hex(beta1),
                    hex(beta2),
                    hex(epsilon)
                );
            }
        }
    }
    s.push_str("end\n");
    s
}

struct Cursor<'a> {
    lines: Vec<(usize, &'a str)>,
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Cursor { lines, at: 0 }
    }

    fn peek(&self) -> Option<(usize, &'a str)> {
        self.lines.get(self.at).copied()
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        let l = self.peek();
        self.at += 1;
        l
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str), ParseError> {
        self.next().ok_or_else(|| ParseError::Syntax {
            line: self.lines.last().map_or(0, |(n, _)| *n) + 1,
            message: format!("unexpected end of file, expected {what}"),
        })
    }
}

fn syntax(line: usize, message: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        line,
        message: message.into(),
    }
}

fn parse_usize(tok: &str, line: usize, what: &str) -> Result<usize, ParseError> {
    tok.parse()
        .map_err(|_| syntax(line, format!("bad {what} '{tok}'")))
}

/// Parse checkpoint text back into a model. The result is validated;
/// structural violations are errors here.
pub fn deserialize(text: &str) -> Result<ModelGraph, ParseError> {
    let mut cur = Cursor::new(text);
    let (line, header) = cur.expect("VALP/1 header")?;
    if header != "VALP/1" {
        return Err(syntax(line, format!("expected header 'VALP/1', got '{header}'")));
    }

    let mut inputs: BTreeMap<InputId, InputNode> = BTreeMap::new();
    let mut outputs: BTreeMap<OutputId, OutputNode> = BTreeMap::new();
    let mut losses: BTreeMap<OutputId, LossKind> = BTreeMap::new();
    let mut nets: BTreeMap<NetId, SubNetwork> = BTreeMap::new();
    let mut arcs: BTreeSet<GraphArc> = BTreeSet::new();
    let mut training: Option<TrainingConfig> = None;
    let mut optimizers: BTreeMap<OutputId, OptimizerSpec> = BTreeMap::new();
    let mut saw_end = false;

    while let Some((line, text)) = cur.next() {
        let toks: Vec<&str> = text.split_whitespace().collect();
        match toks[0] {
            "input" => {
                if toks.len() < 6 || toks[2] != "dim" || toks[4] != "role" {
                    return Err(syntax(line, "expected 'input <id> dim <n> role <text>'"));
                }
                let id = InputId::parse(toks[1])
                    .ok_or_else(|| syntax(line, format!("bad input id '{}'", toks[1])))?;
                let dim = parse_usize(toks[3], line, "dim")?;
                let role = toks[5..].join(" ");
                inputs.insert(
                    id,
                    InputNode {
                        id,
                        feature_dim: dim,
                        role,
                    },
                );
            }
            "output" => {
                if toks.len() != 8 || toks[2] != "dim" || toks[4] != "kind" || toks[6] != "terminal"
                {
                    return Err(syntax(
                        line,
                        "expected 'output <id> dim <n> kind <k> terminal <act>'",
                    ));
                }
                let id = OutputId::parse(toks[1])
                    .ok_or_else(|| syntax(line, format!("bad output id '{}'", toks[1])))?;
                let dim = parse_usize(toks[3], line, "dim")?;
                let kind = OutputKind::parse(toks[5])
                    .ok_or_else(|| syntax(line, format!("bad output kind '{}'", toks[5])))?;
                let terminal = Activation::parse(toks[7])
                    .ok_or_else(|| syntax(line, format!("bad activation '{}'", toks[7])))?;
                outputs.insert(
                    id,
                    OutputNode {
                        id,
                        target_dim: dim,
                        kind,
                        terminal,
                    },
                );
            }
            "loss" => {
                if toks.len() != 3 {
                    return Err(syntax(line, "expected 'loss <output-id> <kind>'"));
                }
                let id = OutputId::parse(toks[1])
                    .ok_or_else(|| syntax(line, format!("bad output id '{}'", toks[1])))?;
                let kind = LossKind::parse(toks[2])
                    .ok_or_else(|| syntax(line, format!("bad loss kind '{}'", toks[2])))?;
                losses.insert(id, kind);
            }
            "net" => {
                if toks.len() != 6 || toks[2] != "layers" || toks[4] != "sampler" {
                    return Err(syntax(line, "expected 'net <id> layers <n> sampler <k|->'"));
                }
                let id = NetId::parse(toks[1])
                    .ok_or_else(|| syntax(line, format!("bad net id '{}'", toks[1])))?;
                let n_layers = parse_usize(toks[3], line, "layer count")?;
                let sampler = if toks[5] == "-" {
                    None
                } else {
                    Some(parse_usize(toks[5], line, "sampler latent width")?)
                };
                let mut layers = Vec::with_capacity(n_layers);
                for _ in 0..n_layers {
                    let (lline, ltext) = cur.expect("layer")?;
                    let lt: Vec<&str> = ltext.split_whitespace().collect();
                    if lt.len() != 4 || lt[0] != "layer" {
                        return Err(syntax(lline, "expected 'layer <act> <in> <out>'"));
                    }
                    let act = Activation::parse(lt[1])
                        .ok_or_else(|| syntax(lline, format!("bad activation '{}'", lt[1])))?;
                    let in_dim = parse_usize(lt[2], lline, "in dim")?;
                    let out_dim = parse_usize(lt[3], lline, "out dim")?;
                    let mut weights = Matrix::zeros(in_dim, out_dim);
                    for r in 0..in_dim {
                        let (wline, wtext) = cur.expect("weight row")?;
                        let wt: Vec<&str> = wtext.split_whitespace().collect();
                        if wt.len() != out_dim + 1 || wt[0] != "w" {
                            return Err(syntax(
                                wline,
                                format!("expected 'w' with {out_dim} hex entries"),
                            ));
                        }
                        for (c, tok) in wt[1..].iter().enumerate() {
                            weights.set(r, c, unhex(tok, wline)?);
                        }
                    }
                    let (bline, btext) = cur.expect("bias row")?;
                    let bt: Vec<&str> = btext.split_whitespace().collect();
                    if bt.len() != out_dim + 1 || bt[0] != "b" {
                        return Err(syntax(
                            bline,
                            format!("expected 'b' with {out_dim} hex entries"),
                        ));
                    }
                    let mut bias = Vec::with_capacity(out_dim);
                    for tok in &bt[1..] {
                        bias.push(unhex(tok, bline)?);
                    }
                    layers.push(DenseLayer::new(weights, bias, act));
                }
                nets.insert(
                    id,
                    SubNetwork {
                        id,
                        layers,
                        sampler,
                    },
                );
            }
            "arc" => {
                if toks.len() != 3 {
                    return Err(syntax(line, "expected 'arc <src> <dst>'"));
                }
                let from = SourceId::parse(toks[1])
                    .ok_or_else(|| syntax(line, format!("bad arc source '{}'", toks[1])))?;
                let to = SinkId::parse(toks[2])
                    .ok_or_else(|| syntax(line, format!("bad arc target '{}'", toks[2])))?;
                arcs.insert(GraphArc { from, to });
            }
            "training" => {
                if toks.len() != 5 || toks[1] != "batch_size" || toks[3] != "seed" {
                    return Err(syntax(line, "expected 'training batch_size <n> seed <u64>'"));
                }
                let batch_size = parse_usize(toks[2], line, "batch size")?;
                let seed: u64 = toks[4]
                    .parse()
                    .map_err(|_| syntax(line, format!("bad seed '{}'", toks[4])))?;
                training = Some(TrainingConfig {
                    batch_size,
                    optimizers: BTreeMap::new(),
                    seed,
                });
            }
            "optimizer" => {
                let id = OutputId::parse(toks.get(1).copied().unwrap_or(""))
                    .ok_or_else(|| syntax(line, "expected 'optimizer <output-id> <kind> ...'"))?;
                let spec = match (toks.get(2).copied(), toks.len()) {
                    (Some("sgd"), 5) if toks[3] == "lr" => OptimizerSpec {
                        kind: OptimizerKind::Sgd,
                        learning_rate: unhex(toks[4], line)?,
                    },
                    (Some("momentum"), 7) if toks[3] == "lr" && toks[5] == "beta" => {
                        OptimizerSpec {
                            kind: OptimizerKind::Momentum {
                                beta: unhex(toks[6], line)?,
                            },
                            learning_rate: unhex(toks[4], line)?,
                        }
                    }
                    (Some("adam"), 11)
                        if toks[3] == "lr"
                            && toks[5] == "beta1"
                            && toks[7] == "beta2"
                            && toks[9] == "eps" =>
                    {
                        OptimizerSpec {
                            kind: OptimizerKind::Adam {
                                beta1: unhex(toks[6], line)?,
                                beta2: unhex(toks[8], line)?,
                                epsilon: unhex(toks[10], line)?,
                            },
                            learning_rate: unhex(toks[4], line)?,
                        }
                    }
                    _ => return Err(syntax(line, "malformed optimizer directive")),
                };
                optimizers.insert(id, spec);
            }
            "end" => {
                saw_end = true;
                if let Some((l, t)) = cur.peek() {
                    return Err(syntax(l, format!("trailing content after 'end': '{t}'")));
                }
            }
            other => {
                return Err(syntax(line, format!("unknown directive '{other}'")));
            }
        }
    }
    if !saw_end {
        return Err(syntax(0, "missing 'end' directive"));
    }
    let mut training = training.ok_or_else(|| syntax(0, "missing 'training' directive"))?;
    training.optimizers = optimizers;

    let model = ModelGraph {
        inputs,
        nets,
        outputs,
        arcs,
        losses,
        training,
        opt_state: BTreeMap::new(),
    };
    let violations = model.validate();
    if !violations.is_empty() {
        return Err(ParseError::Invalid(violations));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::super::testkit::*;
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let m = two_output_example();
        let text = serialize(&m);
        let back = deserialize(&text).unwrap();
        assert_eq!(serialize(&back), text);
        assert_eq!(back.arcs, m.arcs);
        assert_eq!(back.nets[&NetId(5)].layers[0].weights, m.nets[&NetId(5)].layers[0].weights);
    }

    #[test]
    fn empty_arc_list_fails_validation_at_deserialize() {
        let m = minimal_chain(2);
        let text = serialize(&m);
        let gutted: String = text
            .lines()
            .filter(|l| !l.starts_with("arc "))
            .collect::<Vec<_>>()
            .join("\n");
        match deserialize(&gutted) {
            Err(ParseError::Invalid(v)) => assert!(!v.is_empty()),
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn malformed_text_reports_the_line() {
        let m = minimal_chain(2);
        let text = serialize(&m);
        let broken = text.replace("training batch_size", "training batchsize");
        match deserialize(&broken) {
            Err(ParseError::Syntax { line, .. }) => {
                let expect = text
                    .lines()
                    .position(|l| l.starts_with("training"))
                    .unwrap()
                    + 1;
                assert_eq!(line, expect);
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(matches!(
            deserialize("VALP/2\nend\n"),
            Err(ParseError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn hand_written_minimal_model_parses() {
        // Fixture maintained alongside the grammar above: a 3-node chain
        // i0 -> n0 -> o0 with a single 2x2 identity layer.
        let one = hex(1.0);
        let zero = hex(0.0);
        let lr = hex(0.05);
        let text = format!(
            "VALP/1\n\
             # minimal regression chain\n\
             input i0 dim 2 role features\n\
             output o0 dim 2 kind regression terminal identity\n\
             loss o0 mse\n\
             net n0 layers 1 sampler -\n\
             layer identity 2 2\n\
             w {one} {zero}\n\
             w {zero} {one}\n\
             b {zero} {zero}\n\
             arc i0 n0\n\
             arc n0 o0\n\
             training batch_size 4 seed 9\n\
             optimizer o0 sgd lr {lr}\n\
             end\n"
        );
        let m = deserialize(&text).unwrap();
        assert_eq!(m.inputs.len(), 1);
        assert_eq!(m.nets.len(), 1);
        assert_eq!(m.outputs.len(), 1);
        assert_eq!(m.training.batch_size, 4);
        assert_eq!(m.training.seed, 9);
        assert_eq!(m.nets[&NetId(0)].layers[0].weights.get(0, 0), 1.0);
        assert!(m.validate().is_empty());
    }
}
