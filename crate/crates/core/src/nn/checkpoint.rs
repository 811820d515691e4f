//! Binary network checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic            b"DEXCKPT"            7 bytes
//! format version   u32                   currently 1
//! output act       u8                    0 = identity, 1 = tanh
//! layer count      u32                   number of layer sizes
//! layer sizes      u32 * count
//! parameters       f64 * param_count     layer-major (weights row-major, then biases)
//! ```
//!
//! Round-trips are bit-exact: parameters are written as raw IEEE-754 bit
//! patterns.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{MlpSpec, OutputActivation, ParameterVector};

const MAGIC: &[u8; 7] = b"DEXCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(
    mut out: W,
    spec: &MlpSpec,
    params: &ParameterVector<f64>,
) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::config(
            "checkpoint: parameters inconsistent with spec",
        ));
    }
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let act = match spec.output_activation() {
        OutputActivation::Identity => 0u8,
        OutputActivation::Tanh => 1u8,
    };
    out.write_all(&[act])?;
    out.write_all(&(spec.layer_sizes().len() as u32).to_le_bytes())?;
    for &size in spec.layer_sizes() {
        out.write_all(&(size as u32).to_le_bytes())?;
    }
    for &value in params.as_slice() {
        out.write_all(&value.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(MlpSpec, ParameterVector<f64>)> {
    let mut magic = [0u8; 7];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint: bad magic"));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::format(format!(
            "checkpoint: unsupported format version {version}"
        )));
    }
    let mut act_byte = [0u8; 1];
    input.read_exact(&mut act_byte)?;
    let activation = match act_byte[0] {
        0 => OutputActivation::Identity,
        1 => OutputActivation::Tanh,
        other => {
            return Err(Error::format(format!(
                "checkpoint: unknown output activation tag {other}"
            )))
        }
    };
    input.read_exact(&mut word)?;
    let count = u32::from_le_bytes(word) as usize;
    if count < 2 || count > 64 {
        return Err(Error::format(format!(
            "checkpoint: implausible layer count {count}"
        )));
    }
    let mut sizes = Vec::with_capacity(count);
    for _ in 0..count {
        input.read_exact(&mut word)?;
        sizes.push(u32::from_le_bytes(word) as usize);
    }
    let spec = MlpSpec::new(sizes, activation)?;

    let mut values = Vec::with_capacity(spec.param_count());
    let mut buf = [0u8; 8];
    for _ in 0..spec.param_count() {
        input.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::format("checkpoint: trailing bytes after parameters"));
    }
    let params = ParameterVector::from_values(&spec, values)?;
    Ok((spec, params))
}

pub fn save_checkpoint(
    path: &Path,
    spec: &MlpSpec,
    params: &ParameterVector<f64>,
) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    write_checkpoint(&mut writer, spec, params)?;
    writer.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MlpSpec, ParameterVector<f64>)> {
    let file = File::open(path)?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let spec = MlpSpec::policy(4, 2, &[8, 8]).unwrap();
        let mut rng = derive_rng(21, "ckpt", &[]);
        let params = ParameterVector::<f64>::init(&spec, &mut rng);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &spec, &params).unwrap();
        let (spec2, params2) = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(spec, spec2);
        for (a, b) in params.as_slice().iter().zip(params2.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_corrupted_headers() {
        let spec = MlpSpec::value(3, &[4]).unwrap();
        let params = ParameterVector::<f64>::zeros(&spec);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &spec, &params).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(bad_magic.as_slice()).is_err());

        let mut bad_version = bytes.clone();
        bad_version[7] = 99;
        assert!(read_checkpoint(bad_version.as_slice()).is_err());

        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 3);
        assert!(read_checkpoint(truncated.as_slice()).is_err());

        let mut padded = bytes;
        padded.push(0);
        assert!(read_checkpoint(padded.as_slice()).is_err());
    }
}
