//! Flat `key = value` run configuration with `#` comments.
//!
//! Keys are case-insensitive and `-` reads as `_`, so `sub-net` and `LN`
//! are accepted as written in hyperparameter tables.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analysis::{DropoutBiasConfig, FieldSizing, Poly2Spec};
use crate::compute::{Activation, EmbeddingSizes};
use crate::error::{Error, Result};
use crate::extractors::KernelMode;
use crate::models::{AttentionSpec, Family, InitScale, ModelSpec, SubnetSpec};
use crate::optim::{OptimizerKind, OptimizerSpec, Regularizer};
use crate::train::TrainConfig;

struct Key {
    name: &'static str,
    default: &'static str,
    check: fn(&str) -> std::result::Result<(), String>,
}

fn parsed<T: FromStr>(v: &str) -> std::result::Result<(), String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map(|_| ()).map_err(|e| e.to_string())
}

fn any(_: &str) -> std::result::Result<(), String> {
    Ok(())
}

fn flag(v: &str) -> std::result::Result<(), String> {
    parse_bool(v).map(|_| ())
}

fn net(v: &str) -> std::result::Result<(), String> {
    parse_net(v).map(|_| ())
}

fn nets(v: &str) -> std::result::Result<(), String> {
    parse_nets(v).map(|_| ())
}

fn floats(v: &str) -> std::result::Result<(), String> {
    parse_list::<f64>(v).map(|_| ())
}

fn counts(v: &str) -> std::result::Result<(), String> {
    parse_list::<usize>(v).map(|_| ())
}

fn optional_float(v: &str) -> std::result::Result<(), String> {
    if v.is_empty() {
        Ok(())
    } else {
        parsed::<f64>(v)
    }
}

fn conv_kernel(v: &str) -> std::result::Result<(), String> {
    if v.is_empty() {
        return Ok(());
    }
    let (a, b) = v
        .split_once(['x', '×'])
        .ok_or_else(|| format!("`{v}` is not `width x channels`"))?;
    parsed::<usize>(a.trim())?;
    parsed::<usize>(b.trim())
}

macro_rules! keys {
    ($($name:literal = $default:literal : $check:expr),* $(,)?) => {
        &[$(Key { name: $name, default: $default, check: $check }),*]
    };
}

const KEYS: &[Key] = keys![
    // hyperparameter table names
    "bs" = "256": parsed::<usize>,
    "opt" = "adam": parsed::<OptimizerKind>,
    "lr" = "0.001": parsed::<f64>,
    "l2" = "0": parsed::<f64>,
    "k" = "10": parsed::<usize>,
    "kernel" = "": conv_kernel,
    "net" = "[]": net,
    "sub_net" = "[40,5]": parsed::<SubnetSpec>,
    "t" = "1": parsed::<f64>,
    "h" = "16": parsed::<usize>,
    "l2_a" = "0": parsed::<f64>,
    "drop" = "0": parsed::<f64>,
    "ln" = "F": flag,
    // model
    "model" = "fm": parsed::<Family>,
    "k_c" = "": optional_float,
    "k_max" = "40": parsed::<usize>,
    "activation" = "relu": parsed::<Activation>,
    "sub_activation" = "tanh": parsed::<Activation>,
    "kernel_type" = "matrix": parsed::<KernelMode>,
    "init_scale" = "fields": parsed::<InitScale>,
    "init_c" = "1": parsed::<f64>,
    // optimization
    "beta1" = "0.9": parsed::<f64>,
    "beta2" = "0.999": parsed::<f64>,
    "eps" = "1e-8": parsed::<f64>,
    "sparse_update" = "T": flag,
    "l2_global" = "0": parsed::<f64>,
    "epochs" = "1": parsed::<usize>,
    "eval_every" = "0": parsed::<usize>,
    "seed" = "1": parsed::<u64>,
    // data and artifacts
    "raw_data" = "": any,
    "schema" = "": any,
    "label_column" = "label": any,
    "min_count" = "1": parsed::<usize>,
    "buckets" = "10": parsed::<usize>,
    "map" = "": any,
    "encoded" = "": any,
    "train_data" = "": any,
    "valid_data" = "": any,
    "eval_data" = "": any,
    "checkpoint" = "": any,
    "heatmap_image" = "F": flag,
    // synthetic poly-2 data and experiments
    "synth_mode" = "data": any,
    "synth_fields" = "40": parsed::<usize>,
    "synth_categories" = "400": counts,
    "synth_field_size" = "0": parsed::<usize>,
    "synth_noise" = "0.01": parsed::<f64>,
    "synth_positive_ratio" = "0.5": parsed::<f64>,
    "synth_train" = "100000": parsed::<usize>,
    "synth_valid" = "10000": parsed::<usize>,
    "synth_nets" = "[128x3,1];[128,1];[512,1]": nets,
    "synth_poly2" = "T": flag,
    // Adam diagnostics
    "diag_t" = "1,10,100,1000,10000,100000": counts,
    "diag_eps" = "1e-2,1e-3,1e-4,1e-5,1e-6,1e-7,1e-8": floats,
    "diag_g" = "1e-8,1e-6,1e-4,1e-2,1": floats,
    "diag_horizon" = "0,1,10,100,1000,10000": counts,
    "diag_spike_step" = "10000": parsed::<u64>,
    // dropout bias simulation
    "dropout_categories" = "1000": parsed::<usize>,
    "dropout_batches" = "100,200,300,400,500,600,700,800,900,1000": counts,
    "dropout_rates" = "0,0.5": floats,
    "dropout_trials" = "100": parsed::<usize>,
    "dropout_values" = "10": parsed::<usize>,
    // gradient check
    "gc_fields" = "3": parsed::<usize>,
    "gc_field_size" = "4": parsed::<usize>,
    "gc_batch" = "8": parsed::<usize>,
    "gc_h" = "0.001": parsed::<f64>,
    "gc_tol" = "0.0001": parsed::<f64>,
];

pub fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "t" | "true" | "1" | "yes" | "on" => Ok(true),
        "f" | "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean (T/F)")),
    }
}

pub fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| format!("bad list item `{}`", s.trim()))
        })
        .collect()
}

/// Classifier shape `[w1, w2, ..., 1]`, where `AxB` repeats width `A` `B`
/// times. Returns the hidden widths; `[]` and `[1]` mean none.
pub fn parse_net(v: &str) -> std::result::Result<Vec<usize>, String> {
    let inner = v
        .trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| format!("`{v}` is not a bracketed layer list"))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut widths = Vec::new();
    for item in inner.split(',') {
        let item = item.trim();
        let (w, reps) = match item.split_once(['x', '×']) {
            Some((w, r)) => (
                w.trim(),
                r.trim()
                    .parse::<usize>()
                    .map_err(|_| format!("bad repeat in `{item}`"))?,
            ),
            None => (item, 1),
        };
        let w: usize = w.parse().map_err(|_| format!("bad width in `{item}`"))?;
        if w == 0 {
            return Err(format!("zero width in `{v}`"));
        }
        widths.extend(std::iter::repeat_n(w, reps));
    }
    if widths.pop() != Some(1) {
        return Err(format!("`{v}` must end with the single output unit 1"));
    }
    Ok(widths)
}

/// `;`-separated [`parse_net`] shapes, each with at least one hidden layer.
pub fn parse_nets(v: &str) -> std::result::Result<Vec<Vec<usize>>, String> {
    v.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let hidden = parse_net(s)?;
            if hidden.is_empty() {
                Err(format!("`{s}` has no hidden layer"))
            } else {
                Ok(hidden)
            }
        })
        .collect()
}

fn canonical(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS
                .iter()
                .map(|k| (k.name, k.default.to_string()))
                .collect(),
        }
    }
}

impl Config {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|k| k.name)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let name = canonical(key);
        let spec = KEYS
            .iter()
            .find(|k| k.name == name)
            .ok_or_else(|| Error::config(key.trim(), "unknown key"))?;
        let value = value.trim();
        (spec.check)(value).map_err(|m| Error::config(spec.name, m))?;
        self.values.insert(spec.name, value.to_string());
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(pair, "override is not `key=value`"))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Config::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse(
                    format!("config line {}", i + 1),
                    format!("`{line}` is not `key = value`"),
                )
            })?;
            config.set(k, v)?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(canonical(key).as_str())
            .unwrap_or_else(|| panic!("`{key}` is not a config key"))
    }

    /// Typed value; the key was validated when set.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .parse()
            .map_err(|e: T::Err| Error::config(key, e.to_string()))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        parse_bool(self.raw(key)).map_err(|m| Error::config(key, m))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        parse_list(self.raw(key)).map_err(|m| Error::config(key, m))
    }

    /// A path key that must be set.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.optional_path(key)
            .ok_or_else(|| Error::config(key, "required path is not set"))
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let k: usize = self.get("k")?;
        let embedding = match self.raw("k_c") {
            "" => EmbeddingSizes::Fixed(k),
            c => EmbeddingSizes::Adaptive {
                c: c.parse()
                    .map_err(|_| Error::config("k_c", "not a number"))?,
                max: self.get("k_max")?,
            },
        };
        Ok(ModelSpec {
            family: self.get("model")?,
            embedding,
            hidden: parse_net(self.raw("net")).map_err(|m| Error::config("net", m))?,
            activation: self.get("activation")?,
            layer_norm: self.flag("ln")?,
            dropout: self.get("drop")?,
            subnet: self.get("sub_net")?,
            subnet_activation: self.get("sub_activation")?,
            kernel_mode: self.get("kernel_type")?,
            attention: AttentionSpec {
                hidden: self.get("h")?,
                temperature: self.get("t")?,
            },
            init_scale: self.get("init_scale")?,
            init_c: self.get("init_c")?,
        })
    }

    pub fn optimizer(&self) -> Result<OptimizerSpec> {
        let spec = OptimizerSpec {
            kind: self.get("opt")?,
            lr: self.get("lr")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            eps: self.get("eps")?,
            sparse_update: self.flag("sparse_update")?,
        };
        spec.validate()
            .map_err(|e| Error::config("opt", e.to_string()))?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.get("epochs")?,
            batch_size: self.get("bs")?,
            seed: self.seed()?,
            eval_every: self.get("eval_every")?,
            optimizer: self.optimizer()?,
            regularizer: Regularizer {
                sparse_l2: self.get("l2")?,
                attention_l2: self.get("l2_a")?,
                global_l2: self.get("l2_global")?,
            },
        })
    }

    /// Generator settings for one total category count.
    pub fn poly2_spec(&self, categories: usize) -> Result<Poly2Spec> {
        Ok(Poly2Spec {
            fields: self.get("synth_fields")?,
            categories,
            sizing: match self.get::<usize>("synth_field_size")? {
                0 => FieldSizing::Random,
                s => FieldSizing::Fixed(s),
            },
            noise: self.get("synth_noise")?,
            positive_ratio: self.get("synth_positive_ratio")?,
        })
    }

    pub fn synth_nets(&self) -> Result<Vec<Vec<usize>>> {
        parse_nets(self.raw("synth_nets")).map_err(|m| Error::config("synth_nets", m))
    }

    pub fn dropout_bias(&self) -> Result<DropoutBiasConfig> {
        Ok(DropoutBiasConfig {
            categories: self.get("dropout_categories")?,
            batch_sizes: self.list("dropout_batches")?,
            rates: self.list("dropout_rates")?,
            trials: self.get("dropout_trials")?,
            values_per_sample: self.get("dropout_values")?,
            seed: self.seed()?,
        })
    }
}

/// Every key with its resolved value, one `key = value` per line.
impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in KEYS {
            writeln!(f, "{} = {}", k.name, self.values[k.name])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_names_are_keys() {
        let text = "bs = 2000\nopt = Adam\nlr = 1e-3\nl2 = 1e-6\nk = 20\nkernel = 7x256\n\
                    net = [700x5,1]\nsub-net = [40,5]\nt = 0.01\nh = 32\nl2_a = 0.1\ndrop = 0.1\nLN = T\n";
        let c = Config::parse(text).unwrap();
        let spec = c.model_spec().unwrap();
        assert_eq!(spec.hidden, vec![700; 5]);
        assert_eq!(spec.subnet, SubnetSpec { hidden: 40, out: 5 });
        assert!(spec.layer_norm);
        assert_eq!(
            spec.attention,
            AttentionSpec {
                hidden: 32,
                temperature: 0.01
            }
        );
        assert_eq!(spec.dropout, 0.1);
        let t = c.train_config().unwrap();
        assert_eq!(t.batch_size, 2000);
        assert_eq!(t.regularizer.sparse_l2, 1e-6);
        assert_eq!(t.regularizer.attention_l2, 0.1);
    }

    #[test]
    fn unknown_and_malformed_keys_name_the_key() {
        let err = Config::parse("bogus = 1").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let err = Config::parse("lr = fast").unwrap_err().to_string();
        assert!(err.contains("`lr`"), "{err}");
        assert!(Config::parse("model = gbdt").is_err());
        assert!(Config::parse("net = [64,2]").is_err());
        assert!(Config::parse("just words").is_err());
    }

    #[test]
    fn comments_overrides_and_defaults() {
        let mut c = Config::parse("# a run\nmodel = pin # the product network\n\n").unwrap();
        assert_eq!(c.get::<Family>("model").unwrap(), Family::Pin);
        assert_eq!(c.seed().unwrap(), 1);
        c.set_pair("seed=7").unwrap();
        assert_eq!(c.seed().unwrap(), 7);
        assert!(c.set_pair("seed").is_err());
        let round = Config::parse(&c.to_string()).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn net_shapes() {
        assert_eq!(parse_net("[]").unwrap(), Vec::<usize>::new());
        assert_eq!(parse_net("[1]").unwrap(), Vec::<usize>::new());
        assert_eq!(parse_net("[128x3,1]").unwrap(), vec![128; 3]);
        assert_eq!(parse_net("[300, 100, 1]").unwrap(), vec![300, 100]);
        assert_eq!(
            parse_nets("[128x3,1];[512,1]").unwrap(),
            vec![vec![128; 3], vec![512]]
        );
        assert!(parse_nets("[1]").is_err());
    }

    #[test]
    fn adaptive_embedding_keys() {
        let c = Config::parse("k_c = 4\nk_max = 40").unwrap();
        assert_eq!(
            c.model_spec().unwrap().embedding,
            EmbeddingSizes::Adaptive { c: 4.0, max: 40 }
        );
    }
}
