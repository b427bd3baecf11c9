use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::harness::{build_scene, deform_scene, synth_audio, HarnessConfig};
use super::TrainError;
use crate::features::{
    load_wav, read_table, synth_features, write_table, write_wav, AudioClip, SyntheticViews,
    ViewDims,
};
use crate::rng::SeedTree;
use crate::splat::snapshot::{read_scene, write_scene};
use crate::splat::{rasterize, Branch, Camera, Image, Scene};

/// Background behind every render.
pub const BACKGROUND: [f64; 3] = [0.0, 0.0, 0.0];

/// Frames, masks and conditioning inputs of one synthetic clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub harness: HarnessConfig,
    /// Canonical (undeformed) scene.
    pub scene: Scene,
    pub drive: Vec<f64>,
    pub full: Vec<Image>,
    pub face: Vec<Image>,
    pub mouth: Vec<Image>,
    pub audio: AudioClip,
    pub f_exp: Vec<Vec<f64>>,
    pub f_tone: Vec<Vec<f64>>,
}

/// Rounds to the 8-bit levels a PPM stores, so in-memory and on-disk
/// frames agree exactly.
fn quantize(mut img: Image) -> Image {
    for v in &mut img.data {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    img
}

fn frame_path(dir: &Path, kind: &str, frame: usize) -> PathBuf {
    dir.join("frames").join(format!("{kind}_{frame:04}.ppm"))
}

impl Dataset {
    /// Renders the scripted clip. Without `audio` a drive-following tone is synthesized.
    pub fn generate(
        harness: &HarnessConfig,
        dims: &ViewDims,
        audio: Option<AudioClip>,
    ) -> Result<Dataset, TrainError> {
        harness.validate()?;
        let scene = build_scene(harness)?;
        let cam = harness.camera()?;
        let views = SyntheticViews::new(&SeedTree::new(harness.seed).child("features"), dims);
        let audio = match audio {
            Some(a) => a,
            None => synth_audio(harness)?,
        };
        let mut ds = Dataset {
            harness: harness.clone(),
            scene: scene.clone(),
            drive: Vec::new(),
            full: Vec::new(),
            face: Vec::new(),
            mouth: Vec::new(),
            audio,
            f_exp: Vec::new(),
            f_tone: Vec::new(),
        };
        for f in 0..harness.frames {
            let d = harness.drive(f as f64);
            let deformed = deform_scene(&scene, d)?;
            ds.full.push(quantize(rasterize(
                deformed.primitives(),
                &cam,
                &BACKGROUND,
            )?));
            ds.face.push(quantize(rasterize(
                &deformed.branch_primitives(Branch::Face),
                &cam,
                &BACKGROUND,
            )?));
            ds.mouth.push(quantize(rasterize(
                &deformed.branch_primitives(Branch::Mouth),
                &cam,
                &BACKGROUND,
            )?));
            let sf = synth_features(&views, f, d, None);
            ds.f_exp.push(sf.f_exp.values);
            ds.f_tone.push(sf.f_tone.values);
            ds.drive.push(d);
        }
        Ok(ds)
    }

    pub fn frames(&self) -> usize {
        self.drive.len()
    }

    pub fn camera(&self) -> Result<Camera, TrainError> {
        self.harness.camera()
    }

    pub fn ground_truth(&self, branch: Option<Branch>, frame: usize) -> &Image {
        match branch {
            None => &self.full[frame],
            Some(Branch::Face) => &self.face[frame],
            Some(Branch::Mouth) => &self.mouth[frame],
        }
    }

    /// Writes the clip under `dir`: `dataset.txt`, `scene.txt`, `drive.csv`,
    /// `audio.wav`, `f_exp.txt`, `f_tone.txt` and `frames/{full,face,mouth}_NNNN.ppm`.
    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir.join("frames"))?;
        let h = &self.harness;
        let meta = format!(
            "primitives {}\nmouth_primitives {}\nwidth {}\nheight {}\nfocal {}\nframes {}\nheldout {}\nfps {}\nperiod {}\nphase {}\nsample_rate {}\nseed {}\n",
            h.primitives, h.mouth_primitives, h.width, h.height, h.focal, h.frames, h.heldout, h.fps, h.period, h.phase, h.sample_rate, h.seed
        );
        fs::write(dir.join("dataset.txt"), meta)?;
        write_scene(&self.scene, &dir.join("scene.txt"))?;
        let mut csv = String::from("frame,drive\n");
        for (f, d) in self.drive.iter().enumerate() {
            let _ = writeln!(csv, "{f},{d}");
        }
        fs::write(dir.join("drive.csv"), csv)?;
        write_wav(&dir.join("audio.wav"), &self.audio)?;
        let rows = |v: &[Vec<f64>]| v.iter().cloned().enumerate().collect::<Vec<_>>();
        write_table(&dir.join("f_exp.txt"), "frame f_exp", &rows(&self.f_exp))?;
        write_table(&dir.join("f_tone.txt"), "frame f_tone", &rows(&self.f_tone))?;
        for f in 0..self.frames() {
            self.full[f].write_ppm(&frame_path(dir, "full", f))?;
            self.face[f].write_ppm(&frame_path(dir, "face", f))?;
            self.mouth[f].write_ppm(&frame_path(dir, "mouth", f))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Dataset, TrainError> {
        let meta_path = dir.join("dataset.txt");
        let meta = fs::read_to_string(&meta_path)
            .map_err(|e| TrainError::Missing(format!("{}: {e}", meta_path.display())))?;
        let mut h = HarnessConfig::default();
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| TrainError::Format(format!("dataset.txt: {line}")))?;
            let bad = || TrainError::Format(format!("dataset.txt: bad value for {k}: {v}"));
            match k {
                "primitives" => h.primitives = v.parse().map_err(|_| bad())?,
                "mouth_primitives" => h.mouth_primitives = v.parse().map_err(|_| bad())?,
                "width" => h.width = v.parse().map_err(|_| bad())?,
                "height" => h.height = v.parse().map_err(|_| bad())?,
                "focal" => h.focal = v.parse().map_err(|_| bad())?,
                "frames" => h.frames = v.parse().map_err(|_| bad())?,
                "heldout" => h.heldout = v.parse().map_err(|_| bad())?,
                "fps" => h.fps = v.parse().map_err(|_| bad())?,
                "period" => h.period = v.parse().map_err(|_| bad())?,
                "phase" => h.phase = v.parse().map_err(|_| bad())?,
                "sample_rate" => h.sample_rate = v.parse().map_err(|_| bad())?,
                "seed" => h.seed = v.parse().map_err(|_| bad())?,
                _ => return Err(TrainError::Format(format!("dataset.txt: unknown key {k}"))),
            }
        }
        h.validate()?;
        let scene = read_scene(&dir.join("scene.txt"))?;
        let drive_text = fs::read_to_string(dir.join("drive.csv"))?;
        let drive = drive_text
            .lines()
            .skip(1)
            .map(|l| {
                l.split(',')
                    .nth(1)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| TrainError::Format(format!("drive.csv: {l}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if drive.len() != h.frames {
            return Err(TrainError::Format(format!(
                "drive.csv has {} rows for {} frames",
                drive.len(),
                h.frames
            )));
        }
        let audio = load_wav(&dir.join("audio.wav"))?;
        let table = |name: &str| -> Result<Vec<Vec<f64>>, TrainError> {
            let rows = read_table(&dir.join(name))?;
            if rows.len() != h.frames {
                return Err(TrainError::Format(format!(
                    "{name} has {} rows for {} frames",
                    rows.len(),
                    h.frames
                )));
            }
            Ok(rows.into_iter().map(|r| r.1).collect())
        };
        let f_exp = table("f_exp.txt")?;
        let f_tone = table("f_tone.txt")?;
        let mut ds = Dataset {
            harness: h.clone(),
            scene,
            drive,
            full: Vec::new(),
            face: Vec::new(),
            mouth: Vec::new(),
            audio,
            f_exp,
            f_tone,
        };
        for f in 0..h.frames {
            for (kind, out) in [
                ("full", &mut ds.full),
                ("face", &mut ds.face),
                ("mouth", &mut ds.mouth),
            ] {
                let img = Image::read_ppm(&frame_path(dir, kind, f))?;
                if img.width != h.width || img.height != h.height {
                    return Err(TrainError::Format(format!(
                        "{kind} frame {f} is {}x{}",
                        img.width, img.height
                    )));
                }
                out.push(img);
            }
        }
        Ok(ds)
    }
}
