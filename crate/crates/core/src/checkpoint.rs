//! Versioned text checkpoints of a full Alrao training state.
//!
//! The file is a whitespace-separated token stream opened by a magic line.
//! Floats are written in Rust's shortest round-trip form, so a save/load
//! cycle reproduces every bit, including `inf` and `NaN`.

use std::io::{Read, Write};

use rand_chacha::rand_core::SeedableRng;

use crate::averaging::{Averaging, BmaState, SwitchState};
use crate::engine::{AlraoModel, EvalCounters, UpdateRule};
use crate::error::{Error, Result};
use crate::features::{FeatureGroup, FeaturePartition, LrAssignment, ParamSlice};
use crate::nn::{Activation, BatchNorm1d, Conv2d, Dense, Layer, Network, Padding};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &str = "alrao-checkpoint";
pub const VERSION: u32 = 1;

/// Model plus named RNG streams (minibatch order, masks, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form configuration echo, stored verbatim.
    pub config: String,
    pub model: AlraoModel,
    pub rngs: Vec<(String, Rng)>,
}

struct Out<W: Write> {
    w: W,
}

impl<W: Write> Out<W> {
    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}")?;
        Ok(())
    }

    fn floats(&mut self, tag: &str, v: &[f64]) -> Result<()> {
        write!(self.w, "{tag} {}", v.len())?;
        for x in v {
            write!(self.w, " {x:?}")?;
        }
        writeln!(self.w)?;
        Ok(())
    }

    fn tensor(&mut self, t: &Tensor) -> Result<()> {
        write!(self.w, "tensor {}", t.shape().len())?;
        for d in t.shape() {
            write!(self.w, " {d}")?;
        }
        writeln!(self.w)?;
        self.floats("data", t.data())
    }

    fn adam(&mut self, s: &AdamState) -> Result<()> {
        writeln!(
            self.w,
            "adam {} {:?} {:?} {:?} {}",
            s.t,
            s.beta1,
            s.beta2,
            s.epsilon,
            s.m.len()
        )?;
        for (m, v) in s.m.iter().zip(&s.v) {
            self.tensor(m)?;
            self.tensor(v)?;
        }
        Ok(())
    }
}

struct Tokens<'a> {
    it: std::str::SplitWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.it
            .next()
            .ok_or_else(|| Error::Checkpoint("unexpected end of checkpoint".into()))
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let got = self.next()?;
        if got != want {
            return Err(Error::Checkpoint(format!(
                "expected `{want}`, found `{got}`"
            )));
        }
        Ok(())
    }

    fn parse<T: std::str::FromStr>(&mut self) -> Result<T> {
        let tok = self.next()?;
        tok.parse()
            .map_err(|_| Error::Checkpoint(format!("cannot parse `{tok}`")))
    }

    fn floats(&mut self, tag: &str) -> Result<Vec<f64>> {
        self.expect(tag)?;
        let n: usize = self.parse()?;
        (0..n).map(|_| self.parse()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        self.expect("tensor")?;
        let rank: usize = self.parse()?;
        let shape = (0..rank)
            .map(|_| self.parse())
            .collect::<Result<Vec<usize>>>()?;
        let data = self.floats("data")?;
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn adam(&mut self) -> Result<AdamState> {
        self.expect("adam")?;
        let t = self.parse()?;
        let beta1 = self.parse()?;
        let beta2 = self.parse()?;
        let epsilon = self.parse()?;
        let n: usize = self.parse()?;
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            m.push(self.tensor()?);
            v.push(self.tensor()?);
        }
        Ok(AdamState {
            m,
            v,
            t,
            beta1,
            beta2,
            epsilon,
        })
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Relu => "relu",
        Activation::Sigmoid => "sigmoid",
    }
}

impl Checkpoint {
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let mut o = Out { w };
        let m = &self.model;
        o.line(&format!("{MAGIC} {VERSION}"))?;
        let config: Vec<String> = self.config.lines().map(|l| format!("{l:?}")).collect();
        o.line(&format!("config {}", config.len()))?;
        for l in &config {
            // Debug-quoted lines never contain raw whitespace other than spaces,
            // which are escaped below so each line stays one token.
            o.line(&l.replace(' ', "\\u{20}"))?;
        }

        let net = &m.preclassifier;
        let shape: Vec<String> = net.input_shape().iter().map(usize::to_string).collect();
        o.line(&format!("input {} {}", shape.len(), shape.join(" ")))?;
        o.line(&format!("layers {}", net.layers().len()))?;
        for layer in net.layers() {
            match layer {
                Layer::Dense(d) => {
                    o.line("dense")?;
                    o.tensor(&d.weight)?;
                    o.tensor(&d.bias)?;
                }
                Layer::Conv2d(c) => {
                    o.line(match c.padding {
                        Padding::Valid => "conv2d valid",
                        Padding::Same => "conv2d same",
                    })?;
                    o.tensor(&c.weight)?;
                    o.tensor(&c.bias)?;
                }
                Layer::BatchNorm1d(b) => {
                    o.line("batchnorm")?;
                    for t in [&b.gain, &b.bias, &b.running_mean, &b.running_var] {
                        o.tensor(t)?;
                    }
                }
                Layer::Activation(a) => o.line(&format!("activation {}", activation_name(*a)))?,
            }
        }

        o.line(&format!("classifiers {}", m.classifiers.len()))?;
        for c in &m.classifiers {
            o.tensor(&c.weight)?;
            o.tensor(&c.bias)?;
        }
        o.floats("classifier_lrs", &m.classifier_lrs)?;
        o.floats("feature_lrs", &m.feature_lrs.lrs)?;

        o.line(&format!("partition {}", m.partition.groups.len()))?;
        for g in &m.partition.groups {
            let mut s = format!("group {} {} {}", g.layer, g.feature_index, g.slices.len());
            for sl in &g.slices {
                s.push_str(&format!(
                    " {} {} {}",
                    sl.tensor, sl.range.start, sl.range.end
                ));
            }
            o.line(&s)?;
        }

        match &m.averaging {
            Averaging::Switch(s) => {
                o.line(&format!("switch {:?} {}", s.theta, s.t))?;
                o.floats("log_wa", &s.log_wa)?;
                o.floats("log_wb", &s.log_wb)?;
            }
            Averaging::Bma(b) => {
                o.line("bma")?;
                o.floats("log_w", &b.log_w)?;
            }
        }

        match m.update {
            UpdateRule::Sgd => o.line("update sgd")?,
            UpdateRule::Adam => {
                o.line("update adam")?;
                o.adam(
                    m.body_adam
                        .as_ref()
                        .ok_or_else(|| Error::Checkpoint("adam model without body state".into()))?,
                )?;
                o.line(&format!("clone_adam {}", m.classifier_adam.len()))?;
                for s in &m.classifier_adam {
                    o.adam(s)?;
                }
            }
        }
        let c = &m.counters;
        o.line(&format!(
            "counters {} {} {} {} {:?}",
            c.body_forward, c.body_backward, c.classifier_grads, m.steps, m.classifier_l2
        ))?;

        o.line(&format!("rngs {}", self.rngs.len()))?;
        for (name, rng) in &self.rngs {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Checkpoint(format!(
                    "rng name `{name}` must be one nonempty word"
                )));
            }
            let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
            o.line(&format!(
                "rng {name} {seed} {} {}",
                rng.get_stream(),
                rng.get_word_pos()
            ))?;
        }
        o.line("end")?;
        o.w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut t = Tokens {
            it: text.split_whitespace(),
        };
        t.expect(MAGIC)?;
        let version: u32 = t.parse()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        t.expect("config")?;
        let n: usize = t.parse()?;
        let mut lines = Vec::with_capacity(n);
        for _ in 0..n {
            let tok = t.next()?.replace("\\u{20}", " ");
            let inner = tok
                .strip_prefix('"')
                .and_then(|s| s.strip_suffix('"'))
                .ok_or_else(|| Error::Checkpoint(format!("bad config line {tok}")))?;
            lines.push(unescape(inner)?);
        }
        let config = lines.iter().map(|l| format!("{l}\n")).collect();

        t.expect("input")?;
        let rank: usize = t.parse()?;
        let input = (0..rank)
            .map(|_| t.parse())
            .collect::<Result<Vec<usize>>>()?;
        t.expect("layers")?;
        let n_layers: usize = t.parse()?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layers.push(match t.next()? {
                "dense" => Layer::Dense(Dense {
                    weight: t.tensor()?,
                    bias: t.tensor()?,
                }),
                "conv2d" => {
                    let padding = match t.next()? {
                        "valid" => Padding::Valid,
                        "same" => Padding::Same,
                        p => return Err(Error::Checkpoint(format!("unknown padding {p}"))),
                    };
                    Layer::Conv2d(Conv2d {
                        weight: t.tensor()?,
                        bias: t.tensor()?,
                        padding,
                    })
                }
                "batchnorm" => Layer::BatchNorm1d(BatchNorm1d {
                    gain: t.tensor()?,
                    bias: t.tensor()?,
                    running_mean: t.tensor()?,
                    running_var: t.tensor()?,
                }),
                "activation" => Layer::Activation(match t.next()? {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    "sigmoid" => Activation::Sigmoid,
                    a => return Err(Error::Checkpoint(format!("unknown activation {a}"))),
                }),
                k => return Err(Error::Checkpoint(format!("unknown layer kind {k}"))),
            });
        }
        let preclassifier = Network::new(input, layers)?;

        t.expect("classifiers")?;
        let n_cl: usize = t.parse()?;
        let classifiers = (0..n_cl)
            .map(|_| {
                Ok(Dense {
                    weight: t.tensor()?,
                    bias: t.tensor()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier_lrs = t.floats("classifier_lrs")?;
        let feature_lrs = LrAssignment {
            lrs: t.floats("feature_lrs")?,
        };

        t.expect("partition")?;
        let n_groups: usize = t.parse()?;
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            t.expect("group")?;
            let layer = t.parse()?;
            let feature_index = t.parse()?;
            let n_slices: usize = t.parse()?;
            let slices = (0..n_slices)
                .map(|_| {
                    Ok(ParamSlice {
                        tensor: t.parse()?,
                        range: t.parse()?..t.parse()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            groups.push(FeatureGroup {
                layer,
                feature_index,
                slices,
            });
        }

        let averaging = match t.next()? {
            "switch" => {
                let theta = t.parse()?;
                let step = t.parse()?;
                Averaging::Switch(SwitchState {
                    log_wa: t.floats("log_wa")?,
                    log_wb: t.floats("log_wb")?,
                    theta,
                    t: step,
                })
            }
            "bma" => Averaging::Bma(BmaState {
                log_w: t.floats("log_w")?,
            }),
            k => return Err(Error::Checkpoint(format!("unknown averaging {k}"))),
        };

        t.expect("update")?;
        let (update, body_adam, classifier_adam) = match t.next()? {
            "sgd" => (UpdateRule::Sgd, None, Vec::new()),
            "adam" => {
                let body = t.adam()?;
                t.expect("clone_adam")?;
                let n: usize = t.parse()?;
                let clones = (0..n).map(|_| t.adam()).collect::<Result<Vec<_>>>()?;
                (UpdateRule::Adam, Some(body), clones)
            }
            k => return Err(Error::Checkpoint(format!("unknown update rule {k}"))),
        };

        t.expect("counters")?;
        let counters = EvalCounters {
            body_forward: t.parse()?,
            body_backward: t.parse()?,
            classifier_grads: t.parse()?,
        };
        let steps = t.parse()?;
        let classifier_l2 = t.parse()?;

        t.expect("rngs")?;
        let n_rngs: usize = t.parse()?;
        let mut rngs = Vec::with_capacity(n_rngs);
        for _ in 0..n_rngs {
            t.expect("rng")?;
            let name = t.next()?.to_string();
            let hex = t.next()?;
            if hex.len() != 64 {
                return Err(Error::Checkpoint(format!("bad rng seed `{hex}`")));
            }
            let mut seed = [0u8; 32];
            for (i, b) in seed.iter_mut().enumerate() {
                *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                    .map_err(|_| Error::Checkpoint(format!("bad rng seed `{hex}`")))?;
            }
            let mut rng = Rng::from_seed(seed);
            rng.set_stream(t.parse()?);
            rng.set_word_pos(t.parse()?);
            rngs.push((name, rng));
        }
        t.expect("end")?;

        let model = AlraoModel {
            preclassifier,
            classifiers,
            classifier_lrs,
            averaging,
            feature_lrs,
            partition: FeaturePartition { groups },
            update,
            body_adam,
            classifier_adam,
            counters,
            steps,
            classifier_l2,
        };
        Ok(Checkpoint {
            config,
            model,
            rngs,
        })
    }
}

/// Undo `{:?}` string escaping for the characters it produces.
fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('0') => out.push('\0'),
            Some('\\') => out.push('\\'),
            Some('"') => out.push('"'),
            Some('\'') => out.push('\''),
            Some('u') => {
                let rest: String = chars.by_ref().take_while(|&c| c != '}').collect();
                let code = rest
                    .strip_prefix('{')
                    .and_then(|h| u32::from_str_radix(h, 16).ok())
                    .and_then(char::from_u32)
                    .ok_or_else(|| Error::Checkpoint(format!("bad escape \\u{rest}")))?;
                out.push(code);
            }
            other => return Err(Error::Checkpoint(format!("bad escape \\{other:?}"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::engine::{build_alrao, AlraoSpec, AveragingKind};
    use crate::features::LrInterval;
    use crate::rng::rng_from_seed;

    fn model(update: UpdateRule, averaging: AveragingKind) -> AlraoModel {
        let mut rng = rng_from_seed(0);
        let pre = Network::builder(&[1, 5, 5])
            .conv2d(2, 3, Padding::Same, &mut rng)
            .activation(Activation::Relu)
            .dense(6, &mut rng)
            .batchnorm()
            .activation(Activation::Tanh)
            .build()
            .unwrap();
        let spec = AlraoSpec {
            n_cl: 3,
            num_classes: 4,
            interval: LrInterval::new(1e-4, 1.0).unwrap(),
            averaging,
            update,
        };
        let mut m = build_alrao(pre, &spec, &mut rng_from_seed(1), &mut rng_from_seed(2)).unwrap();
        let mut data = rng_from_seed(3);
        for _ in 0..4 {
            let x = Tensor::new(
                vec![5, 1, 5, 5],
                (0..125).map(|_| data.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let ys: Vec<usize> = (0..5).map(|_| data.random_range(0..4)).collect();
            m.step(&x, &ys).unwrap();
        }
        m
    }

    fn round_trip(c: &Checkpoint) -> Checkpoint {
        let mut buf = Vec::new();
        c.save(&mut buf).unwrap();
        Checkpoint::load(buf.as_slice()).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        for (u, a) in [
            (UpdateRule::Sgd, AveragingKind::Switch { theta: 0.999 }),
            (UpdateRule::Adam, AveragingKind::Bma),
        ] {
            let mut rng = rng_from_seed(9);
            let _: u64 = rng.random();
            let c = Checkpoint {
                config: "optimizer = alrao\nname = \"two words\"\n".into(),
                model: model(u, a),
                rngs: vec![("batches".into(), rng)],
            };
            let back = round_trip(&c);
            assert_eq!(back, c);
            let (mut r1, mut r2) = (c.rngs[0].1.clone(), back.rngs[0].1.clone());
            assert_eq!(r1.random::<u64>(), r2.random::<u64>());
        }
    }

    #[test]
    fn special_floats_survive() {
        let mut c = Checkpoint {
            config: String::new(),
            model: model(UpdateRule::Sgd, AveragingKind::Bma),
            rngs: vec![],
        };
        c.model.classifiers[1].weight.data_mut()[0] = f64::INFINITY;
        c.model.classifiers[1].weight.data_mut()[1] = f64::NEG_INFINITY;
        c.model.classifiers[2].bias.data_mut()[0] = -0.0;
        c.model.classifier_lrs[0] = 1e-300;
        let back = round_trip(&c);
        assert_eq!(
            back.model.classifiers[1].weight.data()[..2],
            [f64::INFINITY, f64::NEG_INFINITY]
        );
        assert!(back.model.classifiers[2].bias.data()[0].is_sign_negative());
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_other_versions_and_garbage() {
        assert!(Checkpoint::load("alrao-checkpoint 2".as_bytes()).is_err());
        assert!(Checkpoint::load("something else".as_bytes()).is_err());
        let c = Checkpoint {
            config: String::new(),
            model: model(UpdateRule::Sgd, AveragingKind::Bma),
            rngs: vec![],
        };
        let mut buf = Vec::new();
        c.save(&mut buf).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(Checkpoint::load(buf.as_slice()).is_err());
    }
}
