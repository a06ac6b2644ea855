//! Particle files.
//!
//! Little-endian. A `u32` particle count, then one 14-float (`f32`) record per
//! particle: mean xyz, log-scale xyz, quaternion w x y z, color rgb, opacity.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use super::GaussianParticle;

pub const RECORD_FLOATS: usize = 14;

#[derive(Debug, Error)]
pub enum ParticleFileError {
    #[error("particle file {path}: {message}")]
    Format { path: String, message: String },
    #[error("particle file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode_particles(particles: &[GaussianParticle]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + particles.len() * RECORD_FLOATS * 4);
    out.extend_from_slice(&(particles.len() as u32).to_le_bytes());
    for p in particles {
        let q = p.rotation.quaternion();
        let record = [
            p.mean.x, p.mean.y, p.mean.z, p.log_scale.x, p.log_scale.y, p.log_scale.z, q.w, q.i, q.j, q.k,
            p.color[0], p.color[1], p.color[2], p.opacity,
        ];
        for v in record {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_particles(bytes: &[u8]) -> Result<Vec<GaussianParticle>, String> {
    if bytes.len() < 4 {
        return Err("truncated header".into());
    }
    let count = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let body = &bytes[4..];
    if body.len() != count * RECORD_FLOATS * 4 {
        return Err(format!(
            "header says {count} particles ({} bytes) but body has {} bytes",
            count * RECORD_FLOATS * 4,
            body.len()
        ));
    }
    body.chunks_exact(RECORD_FLOATS * 4)
        .map(|rec| {
            let f: Vec<f64> = rec
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            let q = Quaternion::new(f[6], f[7], f[8], f[9]);
            if q.norm() == 0.0 || !q.norm().is_finite() {
                return Err("zero or non-finite quaternion".to_string());
            }
            Ok(GaussianParticle {
                mean: Vector3::new(f[0], f[1], f[2]),
                log_scale: Vector3::new(f[3], f[4], f[5]),
                rotation: UnitQuaternion::from_quaternion(q),
                color: [f[10], f[11], f[12]],
                opacity: f[13],
            })
        })
        .collect()
}

pub fn write_particles(path: &Path, particles: &[GaussianParticle]) -> Result<(), ParticleFileError> {
    std::fs::write(path, encode_particles(particles)).map_err(|source| ParticleFileError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_particles(path: &Path) -> Result<Vec<GaussianParticle>, ParticleFileError> {
    let bytes = std::fs::read(path).map_err(|source| ParticleFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_particles(&bytes).map_err(|message| ParticleFileError::Format {
        path: path.display().to_string(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let p = GaussianParticle {
            mean: Vector3::new(1.0, 2.0, 3.0),
            log_scale: Vector3::new(-1.0, -2.0, -3.0),
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(0.5, 0.5, 0.5, 0.5)),
            color: [0.25, 0.5, 0.75],
            opacity: 0.875,
        };
        let bytes = encode_particles(std::slice::from_ref(&p));
        assert_eq!(bytes.len(), 4 + 56);
        assert_eq!(&bytes[0..4], &1u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[28..32], &0.5f32.to_le_bytes());
        assert_eq!(&bytes[56..60], &0.875f32.to_le_bytes());
        let back = decode_particles(&bytes).unwrap();
        assert_eq!(back, vec![p]);
    }

    #[test]
    fn truncated_body_is_rejected() {
        let mut bytes = encode_particles(&[GaussianParticle::isotropic(Vector3::zeros(), 1.0, [0.0; 3], 1.0)]);
        bytes.pop();
        assert!(decode_particles(&bytes).is_err());
        assert!(decode_particles(&[1, 0]).is_err());
    }
}
