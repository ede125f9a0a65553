//! Flow checkpoint format.
//!
//! ```text
//! "FFSF" | version u32 | variant u8 | d u32 | M u32 | H u32 | W u32 | f64 payload
//! ```
//!
//! The payload walks the layers in order. Each layer writes its fixed state
//! first (ActNorm: initialized flag as 0.0/1.0; invertible linear: the
//! permutation indices then the diagonal signs), then its trainable
//! parameters in the order of [`FlowModel::params`]. All values are
//! little-endian.

use std::path::Path;

use super::{init_flow, FlowArch, FlowModel, FlowVariant};
use crate::binio::{put_f64s, put_u32, ByteReader};
use crate::error::{invalid, FfsError, Result};
use crate::numerics::SeededRng;

pub const FLOW_MAGIC: &[u8; 4] = b"FFSF";
pub const FLOW_FORMAT_VERSION: u32 = 1;

pub fn write_flow(model: &FlowModel, out: &mut Vec<u8>) -> Result<()> {
    if model.variant == FlowVariant::Custom {
        return invalid("custom flows cannot be checkpointed");
    }
    out.extend_from_slice(FLOW_MAGIC);
    put_u32(out, FLOW_FORMAT_VERSION);
    out.push(model.variant.tag());
    for v in [model.dim(), model.arch.coupling_layers, model.arch.hidden_layers, model.arch.hidden_width] {
        put_u32(out, v as u32);
    }
    let mut payload = Vec::new();
    for layer in &model.layers {
        layer.write_fixed_state(&mut payload);
        layer.write_params(&mut payload);
    }
    put_f64s(out, &payload);
    Ok(())
}

pub(crate) fn read_flow_from(r: &mut ByteReader<'_>) -> Result<FlowModel> {
    r.magic(FLOW_MAGIC)?;
    let version = r.u32()?;
    if version != FLOW_FORMAT_VERSION {
        return r.error(format!("unsupported flow format version {version}"));
    }
    let tag = r.u8()?;
    let Some(variant) = FlowVariant::from_tag(tag) else {
        return r.error(format!("unknown variant tag {tag}"));
    };
    let d = r.u32()? as usize;
    let arch = FlowArch {
        coupling_layers: r.u32()? as usize,
        hidden_layers: r.u32()? as usize,
        hidden_width: r.u32()? as usize,
    };
    let mut model = match init_flow(variant, d, arch, &mut SeededRng::new(0)) {
        Ok(m) => m,
        Err(e) => return r.error(format!("invalid architecture in header: {e}")),
    };
    for layer in &mut model.layers {
        let start = r.offset();
        let fixed = r.f64s(layer.fixed_state_len())?;
        if let Err(msg) = layer.read_fixed_state(&mut &fixed[..]) {
            return Err(FfsError::Format { offset: start, msg });
        }
        let start = r.offset();
        let params = r.f64s(layer.num_params())?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(FfsError::Format { offset: start, msg: "non-finite parameter".into() });
        }
        layer.read_params(&mut &params[..]);
    }
    Ok(model)
}

/// Parses a complete flow checkpoint.
pub fn read_flow(bytes: &[u8]) -> Result<FlowModel> {
    let mut r = ByteReader::new(bytes);
    let model = read_flow_from(&mut r)?;
    r.finish()?;
    Ok(model)
}

impl FlowModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        write_flow(self, &mut out)?;
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FlowModel> {
        read_flow(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::FfsError;

    fn trained_like(variant: FlowVariant) -> FlowModel {
        let mut rng = SeededRng::new(21);
        let mut m = init_flow(variant, 3, FlowArch { coupling_layers: 2, hidden_layers: 1, hidden_width: 5 }, &mut rng).unwrap();
        let p: Vec<f64> = m.params().iter().map(|_| 0.1 * rng.normal()).collect();
        m.set_params(&p).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for variant in FlowVariant::ALL {
            let m = trained_like(variant);
            let mut bytes = Vec::new();
            write_flow(&m, &mut bytes).unwrap();
            let back = read_flow(&bytes).unwrap();
            assert_eq!(back, m);
            let x = [0.2, -0.4, 1.3];
            assert_eq!(back.log_prob(&x).unwrap().to_bits(), m.log_prob(&x).unwrap().to_bits());
        }
    }

    #[test]
    fn header_layout() {
        let m = trained_like(FlowVariant::RealNvp);
        let mut bytes = Vec::new();
        write_flow(&m, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"FFSF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 1);
        assert_eq!(bytes.len(), 9 + 16 + 8 * m.num_params());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = trained_like(FlowVariant::Glow);
        let mut bytes = Vec::new();
        write_flow(&m, &mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_flow(&bad), Err(FfsError::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_flow(&bad), Err(FfsError::Format { offset: 8, .. })));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(read_flow(truncated), Err(FfsError::Format { .. })));

        assert!(write_flow(&FlowModel::identity(2), &mut Vec::new()).is_err());
    }
}
