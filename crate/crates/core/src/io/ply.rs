//! Binary little-endian PLY in the common splat-viewer vertex layout.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{matrix_to_quat, quat_to_matrix, GaussianScene, SH_COEFFS, SH_WIDTH};

const OPACITY_EPS: f64 = 1e-7;

/// Vertex property names in file order.
pub fn property_names() -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"].map(String::from).to_vec();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * (SH_COEFFS - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

pub const PROPERTY_COUNT: usize = 6 + 3 + 3 * (SH_COEFFS - 1) + 1 + 3 + 4;

pub fn header(count: usize) -> String {
    let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {count}\n");
    for name in property_names() {
        h.push_str(&format!("property float {name}\n"));
    }
    h.push_str("end_header\n");
    h
}

pub fn encode_ply(scene: &GaussianScene) -> Result<Vec<u8>> {
    scene.validate()?;
    let n = scene.len();
    let mut out = header(n).into_bytes();
    out.reserve(n * PROPERTY_COUNT * 4);
    let s = scene.as_ref();
    for i in 0..n {
        let mut row = Vec::with_capacity(PROPERTY_COUNT);
        row.extend_from_slice(&scene.means[3 * i..3 * i + 3]);
        row.extend([0.0; 3]);
        let sh = &scene.sh[SH_WIDTH * i..SH_WIDTH * (i + 1)];
        row.extend((0..3).map(|c| sh[c * SH_COEFFS]));
        for c in 0..3 {
            row.extend_from_slice(&sh[c * SH_COEFFS + 1..(c + 1) * SH_COEFFS]);
        }
        let a = scene.opacities[i].clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
        row.push((a / (1.0 - a)).ln());
        row.extend(scene.scales[3 * i..3 * i + 3].iter().map(|v| v.ln()));
        row.extend(matrix_to_quat(&s.rotation(i)));
        for v in row {
            out.extend((v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn header_lines(bytes: &[u8]) -> Result<(Vec<&str>, usize)> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::format("PLY header has no end_header line"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format("PLY header is not UTF-8"))?;
    let lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with("comment")).collect();
    Ok((lines, end + END.len()))
}

pub fn decode_ply(bytes: &[u8]) -> Result<GaussianScene> {
    let (lines, body_start) = header_lines(bytes)?;
    let mut it = lines.into_iter();
    if it.next() != Some("ply") {
        return Err(Error::format("missing PLY magic"));
    }
    if it.next() != Some("format binary_little_endian 1.0") {
        return Err(Error::format("only binary_little_endian 1.0 PLY is supported"));
    }
    let count: usize = it
        .next()
        .and_then(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| Error::format("expected 'element vertex <count>'"))?;
    for (i, want) in property_names().iter().enumerate() {
        let line = it.next().ok_or_else(|| Error::format(format!("missing property {want}")))?;
        if line != format!("property float {want}") {
            return Err(Error::format(format!("property {i} is '{line}', expected 'property float {want}'")));
        }
    }
    if let Some(extra) = it.next() {
        return Err(Error::format(format!("unexpected header line '{extra}'")));
    }
    let body = &bytes[body_start..];
    let need = count * PROPERTY_COUNT * 4;
    if body.len() != need {
        return Err(Error::format(format!("PLY body has {} bytes, expected {need}", body.len())));
    }
    let values: Vec<f64> = body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    let mut scene = GaussianScene::default();
    for row in values.chunks_exact(PROPERTY_COUNT) {
        let mean = [row[0], row[1], row[2]];
        let mut sh = [0.0; SH_WIDTH];
        for c in 0..3 {
            sh[c * SH_COEFFS] = row[6 + c];
            let rest = 9 + c * (SH_COEFFS - 1);
            sh[c * SH_COEFFS + 1..(c + 1) * SH_COEFFS].copy_from_slice(&row[rest..rest + SH_COEFFS - 1]);
        }
        let o = 9 + 3 * (SH_COEFFS - 1);
        let opacity = 1.0 / (1.0 + (-row[o]).exp());
        let scale = [row[o + 1].exp(), row[o + 2].exp(), row[o + 3].exp()];
        let q = [row[o + 4], row[o + 5], row[o + 6], row[o + 7]];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::format("PLY vertex has a zero or non-finite quaternion"));
        }
        scene.push(mean, scale, quat_to_matrix(q.map(|v| v / norm)), opacity, &sh);
    }
    scene.validate()?;
    Ok(scene)
}

pub fn write_ply(path: &Path, scene: &GaussianScene) -> Result<usize> {
    let bytes = encode_ply(scene)?;
    super::write_atomic(path, &bytes)?;
    Ok(bytes.len())
}

pub fn read_ply(path: &Path) -> Result<GaussianScene> {
    decode_ply(&super::read_file(path)?).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::RandomScene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(count: usize) -> GaussianScene {
        RandomScene {
            count,
            lo: [-1.0; 3],
            hi: [1.0; 3],
            scale: (0.01, 0.5),
            opacity: (0.05, 0.95),
            color: (0.0, 1.0),
            sh_rest_std: 0.3,
        }
        .sample(&mut ChaCha8Rng::seed_from_u64(11))
    }

    #[test]
    fn layout_is_62_floats() {
        assert_eq!(PROPERTY_COUNT, 62);
        let names = property_names();
        assert_eq!(names.len(), PROPERTY_COUNT);
        assert_eq!(&names[..3], ["x", "y", "z"]);
        assert_eq!(names[9], "f_rest_0");
        assert_eq!(names[53], "f_rest_44");
        assert_eq!(names[54], "opacity");
        assert_eq!(names[61], "rot_3");
        let bytes = encode_ply(&random(512)).unwrap();
        assert_eq!(bytes.len(), header(512).len() + 512 * 62 * 4);
    }

    #[test]
    fn roundtrip_within_f32() {
        let scene = random(40);
        let back = decode_ply(&encode_ply(&scene).unwrap()).unwrap();
        let close = |a: &[f64], b: &[f64], tol: f64| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(1.0));
        assert!(close(&scene.means, &back.means, 1e-6));
        assert!(close(&scene.scales, &back.scales, 1e-6));
        assert!(close(&scene.opacities, &back.opacities, 1e-6));
        assert!(close(&scene.sh, &back.sh, 1e-6));
        assert!(close(&scene.rotations, &back.rotations, 1e-6));
    }

    #[test]
    fn identity_and_half_opacity() {
        let mut s = GaussianScene::default();
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        s.push([0.0; 3], [1.0; 3], id, 0.5, &[0.0; SH_WIDTH]);
        let bytes = encode_ply(&s).unwrap();
        let body = &bytes[header(1).len()..];
        let f = |i: usize| f32::from_le_bytes(body[4 * i..4 * i + 4].try_into().unwrap());
        assert_eq!(f(54), 0.0);
        assert_eq!([f(58), f(59), f(60), f(61)], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!([f(55), f(56), f(57)], [0.0; 3]);
    }

    #[test]
    fn malformed_inputs_rejected() {
        let bytes = encode_ply(&random(3)).unwrap();
        assert!(decode_ply(&bytes[..bytes.len() - 1]).is_err());
        let swapped = String::from_utf8_lossy(&bytes).replacen("property float y\nproperty float z", "property float z\nproperty float y", 1);
        assert!(decode_ply(swapped.as_bytes()).is_err());
        assert!(decode_ply(b"ply\nformat ascii 1.0\nend_header\n").is_err());
        assert!(decode_ply(b"not a ply").is_err());
    }
}
