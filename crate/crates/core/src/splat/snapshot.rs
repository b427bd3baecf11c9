//! Plain-text scene snapshots.
//!
//! ```text
//! # uasplat scene v1
//! # cx cy cz sx sy sz qw qx qy qz opacity c0 .. c{Z-1} branch
//! color_dim 3
//! 0.1 0.2 3.5 0.05 0.05 0.02 1 0 0 0 0.9 0.8 0.6 0.5 face
//! ```
//!
//! One primitive per line, whitespace separated, quaternion in `(w, x, y, z)`
//! order, branch tag `face` or `mouth`. Lines starting with `#` are comments.
//! Reals are written in shortest round-trip form, so reading a snapshot back
//! reproduces the scene bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use super::{Branch, GaussianPrimitive, Scene, SplatError};

pub fn scene_to_string(scene: &Scene) -> String {
    let z = scene.color_dim().unwrap_or(3);
    let mut out = String::from("# uasplat scene v1\n");
    let _ = write!(out, "# cx cy cz sx sy sz qw qx qy qz opacity");
    for c in 0..z {
        let _ = write!(out, " c{c}");
    }
    out.push_str(" branch\n");
    let _ = writeln!(out, "color_dim {z}");
    for (p, b) in scene.primitives().iter().zip(scene.branches()) {
        let vals = p
            .center
            .iter()
            .chain(p.scale.iter())
            .chain(p.rotation.iter())
            .chain(std::iter::once(&p.opacity))
            .chain(p.color.iter());
        for v in vals {
            let _ = write!(out, "{v} ");
        }
        out.push_str(b.as_str());
        out.push('\n');
    }
    out
}

pub fn scene_from_str(text: &str) -> Result<Scene, SplatError> {
    let mut z = None;
    let mut prims = Vec::new();
    let mut branches = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "color_dim" {
            let v = fields
                .get(1)
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&v| v > 0)
                .ok_or(SplatError::Snapshot(lineno + 1, "bad color_dim"))?;
            z = Some(v);
            continue;
        }
        let z = z.ok_or(SplatError::Snapshot(
            lineno + 1,
            "primitive before color_dim",
        ))?;
        if fields.len() != 11 + z + 1 {
            return Err(SplatError::Snapshot(lineno + 1, "wrong field count"));
        }
        let nums: Vec<f64> = fields[..11 + z]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| SplatError::Snapshot(lineno + 1, "unparseable number"))?;
        let branch = Branch::parse(fields[11 + z])
            .ok_or(SplatError::Snapshot(lineno + 1, "unknown branch tag"))?;
        prims.push(GaussianPrimitive::new(
            Vector3::new(nums[0], nums[1], nums[2]),
            Vector3::new(nums[3], nums[4], nums[5]),
            Vector4::new(nums[6], nums[7], nums[8], nums[9]),
            nums[10],
            nums[11..].to_vec(),
        ));
        branches.push(branch);
    }
    Scene::new(prims, branches)
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<(), SplatError> {
    fs::write(path, scene_to_string(scene))?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Scene, SplatError> {
    scene_from_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let prims = vec![
            GaussianPrimitive::new(
                Vector3::new(0.1, -0.2 / 3.0, 3.5),
                Vector3::new(0.05, 0.07, 1e-3),
                Vector4::new(0.6, 0.8, 0.0, 0.0),
                0.9,
                vec![1.0 / 3.0, 0.0, 1.0],
            ),
            GaussianPrimitive::isotropic(Vector3::zeros(), 0.2, 0.5, vec![0.5, 0.25, 0.125]),
        ];
        let scene = Scene::new(prims, vec![Branch::Face, Branch::Mouth]).unwrap();
        let back = scene_from_str(&scene_to_string(&scene)).unwrap();
        assert_eq!(back, scene);
    }

    #[test]
    fn malformed_lines_are_reported() {
        assert!(matches!(
            scene_from_str("color_dim 1\n0 0 0 1 1 1 1 0 0 0 0.5 0.5 nose\n"),
            Err(SplatError::Snapshot(2, _))
        ));
        assert!(scene_from_str("0 0 0 1 1 1 1 0 0 0 0.5 0.5 face\n").is_err());
    }
}
