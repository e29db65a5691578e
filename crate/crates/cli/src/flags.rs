//! One `--flag` per configuration key, generated from the key lists so the
//! command line can never drift from the config structs.

use std::collections::BTreeMap;
use std::marker::PhantomData;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Args, FromArgMatches};
use triaffine_core::bench::BenchConfig;
use triaffine_core::pipeline::ModelConfig;
use triaffine_core::Result;

pub trait KeySet {
    const KEYS: &'static [&'static str];
    const HEADING: &'static str;
    fn defaults() -> String;
}

#[derive(Clone, Debug)]
pub struct ModelKeys;
#[derive(Clone, Debug)]
pub struct BenchKeys;

impl KeySet for ModelKeys {
    const KEYS: &'static [&'static str] = &ModelConfig::KEYS;
    const HEADING: &'static str = "Model configuration";
    fn defaults() -> String {
        ModelConfig::default().to_kv()
    }
}

impl KeySet for BenchKeys {
    const KEYS: &'static [&'static str] = &BenchConfig::KEYS;
    const HEADING: &'static str = "Benchmark configuration";
    fn defaults() -> String {
        BenchConfig::default().to_kv()
    }
}

/// `--config FILE`, repeated `--set KEY=VALUE`, and one flag per key.
/// Precedence, lowest first: defaults, config file, `--set`, named flags.
#[derive(Clone, Debug)]
pub struct KvFlags<K> {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub named: Vec<(&'static str, String)>,
    _keys: PhantomData<K>,
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

impl<K: KeySet> KvFlags<K> {
    /// Feeds every override, in precedence order, to `set`.
    pub fn apply(&self, mut set: impl FnMut(&str, &str) -> Result<()>, file_text: Option<&str>) -> anyhow::Result<()> {
        if let Some(text) = file_text {
            triaffine_core::pipeline::apply_kv_lines(text, &mut set)?;
        }
        for kv in &self.set {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| crate::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            set(k.trim(), v.trim())?;
        }
        for (k, v) in &self.named {
            set(k, v)?;
        }
        Ok(())
    }
}

impl<K: KeySet> FromArgMatches for KvFlags<K> {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut named = Vec::new();
        for &key in K::KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                named.push((key, v.clone()));
            }
        }
        Ok(Self {
            config: m.get_one::<PathBuf>("config").cloned(),
            set: m.get_many::<String>("set").map(|v| v.cloned().collect()).unwrap_or_default(),
            named,
            _keys: PhantomData,
        })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl<K: KeySet> Args for KvFlags<K> {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        let defaults: BTreeMap<String, String> = K::defaults()
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
            .collect();
        let mut cmd = cmd
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("key = value file with configuration fields"),
            )
            .arg(
                Arg::new("set")
                    .long("set")
                    .value_name("KEY=VALUE")
                    .action(ArgAction::Append)
                    .help("override one configuration field (repeatable)"),
            );
        for &key in K::KEYS {
            let help = match defaults.get(key) {
                Some(v) => format!("default: {v}"),
                None => String::new(),
            };
            cmd = cmd.arg(Arg::new(key).long(flag_name(key)).value_name("VALUE").help(help).help_heading(K::HEADING));
        }
        cmd
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Self::augment_args(cmd)
    }
}
