//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use uasplat::deform::HeadInit;
use uasplat::features::ViewDims;
use uasplat::fusion::FusionMode;
use uasplat::train::{HarnessConfig, ModelConfig, TrainConfig};

use crate::CliError;

/// Resolved settings of one command: defaults, then the config file, then
/// command-line overrides. Keys keep their declaration order when echoed.
#[derive(Clone, Debug)]
pub struct RunConfig {
    order: Vec<&'static str>,
    values: BTreeMap<&'static str, String>,
}

fn harness_keys() -> Vec<(&'static str, String)> {
    let h = HarnessConfig::default();
    let d = ViewDims::default();
    vec![
        ("primitives", h.primitives.to_string()),
        ("mouth_primitives", h.mouth_primitives.to_string()),
        ("width", h.width.to_string()),
        ("height", h.height.to_string()),
        ("focal", h.focal.to_string()),
        ("frames", h.frames.to_string()),
        ("heldout", h.heldout.to_string()),
        ("fps", h.fps.to_string()),
        ("period", h.period.to_string()),
        ("phase", h.phase.to_string()),
        ("sample_rate", h.sample_rate.to_string()),
        ("seed", h.seed.to_string()),
        ("exp_dim", d.exp.to_string()),
        ("tone_dim", d.tone.to_string()),
        ("wav", String::new()),
    ]
}

fn train_keys(with_fusion: bool) -> Vec<(&'static str, String)> {
    let t = TrainConfig::default();
    let m = &t.model;
    let mut keys = vec![
        ("seed", t.seed.to_string()),
        ("branch_iterations", t.branch_iterations.to_string()),
        ("joint_iterations", t.joint_iterations.to_string()),
        ("lambda", t.lambda.to_string()),
        ("gamma", t.gamma.to_string()),
        ("lr_network", t.lr_network.to_string()),
        ("lr_planes", t.lr_planes.to_string()),
        ("lr_scene", t.lr_scene.to_string()),
        ("nll_weight", t.nll_weight.to_string()),
        ("tone_noise", t.tone_noise.to_string()),
    ];
    if with_fusion {
        keys.push(("fusion", m.fusion.as_str().to_string()));
    }
    keys.extend([
        ("members", m.members.to_string()),
        ("hidden", m.hidden.to_string()),
        ("state_dim", m.state_dim.to_string()),
        ("fourier_bands", m.fourier_bands.to_string()),
        ("audio_dim", m.dims.audio.to_string()),
        ("emotion_dim", m.dims.emo_attn.to_string()),
        ("audio_window", m.audio_window.to_string()),
        ("emotion_window", m.emotion_window.to_string()),
        ("base_res", m.base_res.to_string()),
        ("code_dim", m.code_dim.to_string()),
        ("head_init", "zero".to_string()),
    ]);
    keys
}

/// Keys accepted by `command`, with their defaults.
pub fn keys_for(command: &str) -> Vec<(&'static str, String)> {
    let s = |v: &str| v.to_string();
    match command {
        "synth-scene" => {
            let mut k = vec![("out", s("dataset"))];
            k.extend(harness_keys());
            k
        }
        "train" => {
            let mut k = vec![("data", s("dataset")), ("out", s("run"))];
            k.extend(train_keys(true));
            k
        }
        "eval" => vec![
            ("data", s("dataset")),
            ("run", s("run")),
            ("out", s("run")),
            ("split", s("heldout")),
        ],
        "render" => vec![
            ("data", s("dataset")),
            ("run", s("run")),
            ("out", s("frames")),
        ],
        "ablate-fusion" => {
            let mut k = vec![("data", s("dataset")), ("out", s("ablation"))];
            k.extend(train_keys(false));
            k
        }
        _ => Vec::new(),
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!(
                "{origin}:{}: expected key = value, got `{line}`",
                n + 1
            ))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `--key value` and `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected --key value, got `{a}`")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn resolve(
        command: &str,
        config: Option<&Path>,
        overrides: &[String],
    ) -> Result<RunConfig, CliError> {
        let defaults = keys_for(command);
        let order: Vec<&'static str> = defaults.iter().map(|(k, _)| *k).collect();
        let mut cfg = RunConfig {
            order,
            values: defaults.into_iter().collect(),
        };
        let mut overrides = parse_overrides(overrides)?;
        let mut file = config.map(Path::to_path_buf);
        if let Some(i) = overrides.iter().position(|(k, _)| k == "config") {
            file = Some(PathBuf::from(overrides.remove(i).1));
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(&path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (k, v) in parse_pairs(&text, &path.display().to_string())? {
                cfg.set(command, &k, v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(command, &k, v)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, command: &str, key: &str, value: String) -> Result<(), CliError> {
        match self.order.iter().find(|k| **k == key) {
            Some(k) => {
                self.values.insert(k, value);
                Ok(())
            }
            None => Err(CliError::Usage(format!(
                "unknown key `{key}` for {command}"
            ))),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.str(key))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.str(key);
        v.parse()
            .map_err(|_| CliError::Usage(format!("invalid value for {key}: `{v}`")))
    }

    /// Every key in declaration order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in &self.order {
            let _ = writeln!(out, "{k} = {}", self.values[k]);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_text())
            .map_err(|e| CliError::Io(path.display().to_string(), e))
    }

    pub fn harness(&self) -> Result<(HarnessConfig, ViewDims), CliError> {
        let h = HarnessConfig {
            primitives: self.get("primitives")?,
            mouth_primitives: self.get("mouth_primitives")?,
            width: self.get("width")?,
            height: self.get("height")?,
            focal: self.get("focal")?,
            frames: self.get("frames")?,
            heldout: self.get("heldout")?,
            fps: self.get("fps")?,
            period: self.get("period")?,
            phase: self.get("phase")?,
            sample_rate: self.get("sample_rate")?,
            seed: self.get("seed")?,
        };
        let dims = ViewDims {
            exp: self.get("exp_dim")?,
            tone: self.get("tone_dim")?,
            ..ViewDims::default()
        };
        Ok((h, dims))
    }

    /// Training settings; `exp`/`tone` widths come from the dataset.
    pub fn train(&self, exp_dim: usize, tone_dim: usize) -> Result<TrainConfig, CliError> {
        let fusion = if self.values.contains_key("fusion") {
            FusionMode::parse(self.str("fusion")).ok_or_else(|| {
                CliError::Usage(format!(
                    "fusion must be uncertainty or uniform, got `{}`",
                    self.str("fusion")
                ))
            })?
        } else {
            FusionMode::Uncertainty
        };
        let head_init = match self.str("head_init") {
            "zero" => HeadInit::Zero,
            "glorot" => HeadInit::Glorot,
            other => {
                return Err(CliError::Usage(format!(
                    "head_init must be zero or glorot, got `{other}`"
                )))
            }
        };
        let model = ModelConfig {
            members: self.get("members")?,
            hidden: self.get("hidden")?,
            state_dim: self.get("state_dim")?,
            fourier_bands: self.get("fourier_bands")?,
            dims: ViewDims {
                audio: self.get("audio_dim")?,
                exp: exp_dim,
                tone: tone_dim,
                emo_attn: self.get("emotion_dim")?,
            },
            audio_window: self.get("audio_window")?,
            emotion_window: self.get("emotion_window")?,
            base_res: self.get("base_res")?,
            code_dim: self.get("code_dim")?,
            fusion,
            head_init,
            ..ModelConfig::default()
        };
        Ok(TrainConfig {
            branch_iterations: self.get("branch_iterations")?,
            joint_iterations: self.get("joint_iterations")?,
            lambda: self.get("lambda")?,
            gamma: self.get("gamma")?,
            lr_network: self.get("lr_network")?,
            lr_planes: self.get("lr_planes")?,
            lr_scene: self.get("lr_scene")?,
            seed: self.get("seed")?,
            nll_weight: self.get("nll_weight")?,
            tone_noise: self.get("tone_noise")?,
            model,
        })
    }
}
