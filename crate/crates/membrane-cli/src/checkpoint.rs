//! Binary state checkpoints for bit-exact resume.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "MEMB" | version u32 | lmax u32 | nlat u32 | nlon u32 | t f64
//! | w  (node-major x,y,z f64 triples)
//! | wdot (node-major x,y,z f64 triples)
//! | checksum u64 (FNV-1a over all preceding bytes)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use membrane::dynamics::State;
use membrane::geometry::Embedding;
use membrane::harmonics::{SphGrid, Vec3Field};

pub const MAGIC: &[u8; 4] = b"MEMB";
pub const VERSION: u32 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub fn encode(state: &State) -> Vec<u8> {
    let grid = state.w.grid();
    let n = grid.len();
    let mut buf = Vec::with_capacity(24 + 8 + 48 * n + 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(state.w.lmax() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.nlat() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.nlon() as u32).to_le_bytes());
    buf.extend_from_slice(&state.t.to_le_bytes());
    for field in [state.w.pos(), &state.wdot] {
        for node in 0..n {
            let v = field.at(node);
            buf.extend_from_slice(&v.x.to_le_bytes());
            buf.extend_from_slice(&v.y.to_le_bytes());
            buf.extend_from_slice(&v.z.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    buf
}

pub fn decode(bytes: &[u8]) -> Result<State> {
    if bytes.len() < 28 {
        bail!("checkpoint truncated: {} bytes is shorter than the header", bytes.len());
    }
    if &bytes[0..4] != MAGIC {
        bail!("not a checkpoint file: bad magic {:?}", &bytes[0..4]);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        bail!("checkpoint version mismatch: file has {version}, this build reads {VERSION}");
    }
    let lmax = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let nlat = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let nlon = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let n = nlat * nlon;
    let expected = 28 + 48 * n + 8;
    if bytes.len() != expected {
        bail!(
            "checkpoint corrupted: expected {expected} bytes for a {nlat}x{nlon} grid, got {}",
            bytes.len()
        );
    }
    let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().unwrap());
    let computed = fnv1a64(&bytes[..expected - 8]);
    if stored != computed {
        bail!("checkpoint corrupted: checksum mismatch ({stored:#x} != {computed:#x})");
    }

    let t = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let grid = SphGrid::new(nlat, nlon)?;
    let read_field = |offset: usize| -> Vec3Field {
        let mut f = Vec3Field::zeros(grid.clone());
        for node in 0..n {
            let base = offset + 24 * node;
            let x = f64::from_le_bytes(bytes[base..base + 8].try_into().unwrap());
            let y = f64::from_le_bytes(bytes[base + 8..base + 16].try_into().unwrap());
            let z = f64::from_le_bytes(bytes[base + 16..base + 24].try_into().unwrap());
            f.set(node, membrane::nalgebra::Vector3::new(x, y, z));
        }
        f
    };
    let w = read_field(28);
    let wdot = read_field(28 + 24 * n);
    Ok(State {
        w: Embedding::new(w, lmax),
        wdot,
        t,
    })
}

/// Atomically write a checkpoint (tmp + rename) so a crash mid-write never
/// leaves a half-written file behind the final name.
pub fn write(state: &State, path: &Path) -> Result<()> {
    let bytes = encode(state);
    let tmp = path.with_extension("memb.tmp");
    {
        let mut f = fs::File::create(&tmp)
            .with_context(|| format!("creating checkpoint {}", tmp.display()))?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming checkpoint into place at {}", path.display()))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<State> {
    let bytes =
        fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use membrane::harmonics::SpectralField;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_state(lmax: usize, seed: u64) -> State {
        let grid = SphGrid::for_lmax(lmax);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng| {
            Vec3Field::new(
                SpectralField::random_band(lmax, 0, rng)
                    .synthesize(grid.clone())
                    .unwrap(),
                SpectralField::random_band(lmax, 0, rng)
                    .synthesize(grid.clone())
                    .unwrap(),
                SpectralField::random_band(lmax, 0, rng)
                    .synthesize(grid.clone())
                    .unwrap(),
            )
        };
        State {
            w: Embedding::new(mk(&mut rng), lmax),
            wdot: mk(&mut rng),
            t: 1.2345,
        }
    }

    #[test]
    fn roundtrip_bit_exact() {
        let state = random_state(8, 99);
        let bytes = encode(&state);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.t.to_bits(), state.t.to_bits());
        assert_eq!(back.w.lmax(), state.w.lmax());
        for node in 0..state.w.grid().len() {
            let (a, b) = (state.w.pos().at(node), back.w.pos().at(node));
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
            assert_eq!(a.z.to_bits(), b.z.to_bits());
            let (a, b) = (state.wdot.at(node), back.wdot.at(node));
            assert_eq!(a.x.to_bits(), b.x.to_bits());
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let state = random_state(4, 5);
        let bytes = encode(&state);
        let err = decode(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(err.to_string().contains("corrupted"), "{err}");
        let err = decode(&bytes[..10]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn version_bump_is_reported_with_both_versions() {
        let state = random_state(4, 6);
        let mut bytes = encode(&state);
        bytes[4] = VERSION as u8 + 1;
        // Re-stamp the checksum so only the version differs.
        let n = bytes.len();
        let sum = fnv1a64(&bytes[..n - 8]);
        bytes[n - 8..].copy_from_slice(&sum.to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("version mismatch"), "{msg}");
        assert!(msg.contains(&format!("{}", VERSION + 1)) && msg.contains("reads 1"), "{msg}");
    }

    #[test]
    fn bitflip_detected_by_checksum() {
        let state = random_state(4, 7);
        let mut bytes = encode(&state);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }
}
