use std::fs;
use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::CameraRig;

/// JSON layout of a camera rig. `world_to_camera` is row-major.
#[derive(Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    near_clip: f64,
    world_to_camera: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far_clip: Option<f64>,
}

pub fn rig_to_json(rig: &CameraRig) -> String {
    let m = &rig.world_to_camera;
    let json = CameraJson {
        fx: rig.fx,
        fy: rig.fy,
        cx: rig.cx,
        cy: rig.cy,
        width: rig.width,
        height: rig.height,
        near_clip: rig.near_clip,
        world_to_camera: (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect(),
        far_clip: rig.far_clip,
    };
    let mut text = serde_json::to_string_pretty(&json).expect("camera json serializes");
    text.push('\n');
    text
}

pub fn rig_from_json(text: &str) -> Result<CameraRig> {
    let json: CameraJson = serde_json::from_str(text)?;
    if json.world_to_camera.len() != 16 {
        return Err(Error::DimensionMismatch {
            expected: "16 world_to_camera entries".into(),
            actual: json.world_to_camera.len().to_string(),
        });
    }
    let rig = CameraRig {
        fx: json.fx,
        fy: json.fy,
        cx: json.cx,
        cy: json.cy,
        width: json.width,
        height: json.height,
        world_to_camera: Matrix4::from_row_slice(&json.world_to_camera),
        near_clip: json.near_clip,
        far_clip: json.far_clip,
    };
    rig.validate()?;
    Ok(rig)
}

pub fn write_camera(path: &Path, rig: &CameraRig) -> Result<()> {
    fs::write(path, rig_to_json(rig))?;
    Ok(())
}

pub fn read_camera(path: &Path) -> Result<CameraRig> {
    rig_from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn roundtrip_is_exact() {
        let mut rig = CameraRig::look_at(
            Vector3::new(1.1, 2.3, 1.7),
            Vector3::new(4.2, 0.3, 0.9),
            Vector3::z(),
            64,
            48,
            1.234,
        )
        .unwrap();
        assert_eq!(rig_from_json(&rig_to_json(&rig)).unwrap(), rig);
        rig.far_clip = Some(80.0);
        assert_eq!(rig_from_json(&rig_to_json(&rig)).unwrap(), rig);
    }

    #[test]
    fn row_major_order() {
        let text = r#"{"fx":10,"fy":10,"cx":5,"cy":5,"width":10,"height":10,"near_clip":0.05,
            "world_to_camera":[1,0,0,7, 0,1,0,8, 0,0,1,9, 0,0,0,1]}"#;
        let rig = rig_from_json(text).unwrap();
        assert_eq!(rig.translation(), Vector3::new(7.0, 8.0, 9.0));
    }

    #[test]
    fn rejects_bad_files() {
        assert!(rig_from_json("{").is_err());
        let short = r#"{"fx":10,"fy":10,"cx":5,"cy":5,"width":10,"height":10,"near_clip":0.05,"world_to_camera":[1,0,0]}"#;
        assert!(rig_from_json(short).is_err());
        let scaled = r#"{"fx":10,"fy":10,"cx":5,"cy":5,"width":10,"height":10,"near_clip":0.05,
            "world_to_camera":[2,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]}"#;
        assert!(rig_from_json(scaled).is_err());
    }
}
