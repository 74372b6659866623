//! The `flowpack` container, version 1.
//!
//! A file is one UTF-8 JSON header line terminated by `\n`, followed by a
//! payload of little-endian `f64` values. For fields and ensembles the payload
//! holds, for each member (outer) and each grid point in flatten order, the
//! pair `(u, v)`. Other artifact kinds (`latents`, `basis`, `state`,
//! `measurements`) reuse the container and describe their payload layout with
//! extra header keys.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{EnsembleForecast, Grid3D, GriddedField};
use crate::error::{Error, Result};

pub const FLOWPACK_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Field,
    Ensemble,
    Latents,
    Basis,
    State,
    Measurements,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u64,
    pub kind: Kind,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e: Option<usize>,
    /// Kind-specific keys.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Header {
    pub fn new(kind: Kind) -> Self {
        Header {
            version: FLOWPACK_VERSION,
            kind,
            grid: None,
            e: None,
            extra: Map::new(),
        }
    }

    pub fn with_grid(mut self, grid: Grid3D) -> Self {
        self.grid = Some(grid);
        self
    }

    pub fn set<T: Serialize>(&mut self, key: &str, value: T) -> Result<()> {
        self.extra.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn get<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .extra
            .get(key)
            .ok_or_else(|| Error::Format(format!("header is missing '{key}'")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn require_grid(&self) -> Result<Grid3D> {
        let grid = self
            .grid
            .ok_or_else(|| Error::Format("header is missing grid fields".into()))?;
        grid.validate()
            .map_err(|e| Error::Format(format!("header grid: {e}")))?;
        Ok(grid)
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected kind {kind:?}, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Header plus raw payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Flowpack {
    pub header: Header,
    pub payload: Vec<f64>,
}

impl Flowpack {
    pub fn new(header: Header, payload: Vec<f64>) -> Self {
        Flowpack { header, payload }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        if self.payload.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flowpack payload".into()));
        }
        let line = serde_json::to_string(&self.header)?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        let mut bytes = Vec::with_capacity(self.payload.len() * 8);
        for v in &self.payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Format("header line is not newline-terminated".into()));
        }
        line.pop();
        let raw: Value = serde_json::from_slice(&line)?;
        match raw.get("version").and_then(Value::as_u64) {
            Some(FLOWPACK_VERSION) => {}
            Some(v) => return Err(Error::UnsupportedVersion(v)),
            None => return Err(Error::Format("header has no integer 'version'".into())),
        }
        let header: Header = serde_json::from_value(raw)?;
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format(format!(
                "payload length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        let payload: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if payload.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flowpack payload".into()));
        }
        Ok(Flowpack { header, payload })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = fs::File::open(path)?;
        Self::read_from(file)
    }

    pub fn expect_payload_len(&self, expected: usize) -> Result<()> {
        if self.payload.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{:?} payload holds {} values, header implies {expected}",
                self.header.kind,
                self.payload.len()
            )));
        }
        Ok(())
    }
}

/// A field or an ensemble read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowpackValue {
    Field(GriddedField),
    Ensemble(EnsembleForecast),
}

impl From<GriddedField> for FlowpackValue {
    fn from(f: GriddedField) -> Self {
        FlowpackValue::Field(f)
    }
}

impl From<EnsembleForecast> for FlowpackValue {
    fn from(e: EnsembleForecast) -> Self {
        FlowpackValue::Ensemble(e)
    }
}

pub fn field_to_flowpack(field: &GriddedField) -> Flowpack {
    Flowpack::new(
        Header::new(Kind::Field).with_grid(*field.grid()),
        field.interleaved(),
    )
}

pub fn ensemble_to_flowpack(ensemble: &EnsembleForecast) -> Flowpack {
    let mut header = Header::new(Kind::Ensemble).with_grid(*ensemble.grid());
    header.e = Some(ensemble.len());
    let payload = ensemble
        .members()
        .iter()
        .flat_map(|m| m.interleaved())
        .collect();
    Flowpack::new(header, payload)
}

pub fn decode_value(pack: &Flowpack) -> Result<FlowpackValue> {
    let grid = pack.header.require_grid()?;
    let per_member = 2 * grid.len();
    match pack.header.kind {
        Kind::Field => {
            pack.expect_payload_len(per_member)?;
            Ok(FlowpackValue::Field(GriddedField::from_interleaved(
                grid,
                &pack.payload,
            )?))
        }
        Kind::Ensemble => {
            let e = pack
                .header
                .e
                .ok_or_else(|| Error::Format("ensemble header is missing 'e'".into()))?;
            pack.expect_payload_len(per_member * e)?;
            let members = pack
                .payload
                .chunks_exact(per_member)
                .map(|c| GriddedField::from_interleaved(grid, c))
                .collect::<Result<Vec<_>>>()?;
            Ok(FlowpackValue::Ensemble(EnsembleForecast::new(members)?))
        }
        other => Err(Error::Format(format!(
            "kind {other:?} is not a field or ensemble"
        ))),
    }
}

pub fn write_flowpack(path: impl AsRef<Path>, value: &FlowpackValue) -> Result<()> {
    match value {
        FlowpackValue::Field(f) => field_to_flowpack(f).save(path),
        FlowpackValue::Ensemble(e) => ensemble_to_flowpack(e).save(path),
    }
}

pub fn read_flowpack(path: impl AsRef<Path>) -> Result<FlowpackValue> {
    decode_value(&Flowpack::load(path)?)
}

pub fn read_field(path: impl AsRef<Path>) -> Result<GriddedField> {
    match read_flowpack(path)? {
        FlowpackValue::Field(f) => Ok(f),
        FlowpackValue::Ensemble(_) => Err(Error::Format("expected a field, found an ensemble".into())),
    }
}

pub fn read_ensemble(path: impl AsRef<Path>) -> Result<EnsembleForecast> {
    match read_flowpack(path)? {
        FlowpackValue::Ensemble(e) => Ok(e),
        FlowpackValue::Field(_) => Err(Error::Format("expected an ensemble, found a field".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowgrid::build_grid;
    use proptest::prelude::*;

    fn roundtrip(pack: &Flowpack) -> Result<Flowpack> {
        let mut buf = Vec::new();
        pack.write_to(&mut buf)?;
        Flowpack::read_from(buf.as_slice())
    }

    fn small_ensemble() -> EnsembleForecast {
        let g = build_grid((0.0, 1.0), (0.0, 2.0), (0.0, 3.0), 2, 2, 2).unwrap();
        let members = (0..3)
            .map(|m| {
                let v = (0..8)
                    .map(|p| [m as f64 + p as f64 * 0.1, -0.3 * p as f64 + 1e-17])
                    .collect();
                GriddedField::new(g, v).unwrap()
            })
            .collect();
        EnsembleForecast::new(members).unwrap()
    }

    #[test]
    fn ensemble_roundtrip_is_exact() {
        let ens = small_ensemble();
        let back = decode_value(&roundtrip(&ensemble_to_flowpack(&ens)).unwrap()).unwrap();
        assert_eq!(back, FlowpackValue::Ensemble(ens));
    }

    #[test]
    fn header_line_layout() {
        let ens = small_ensemble();
        let mut buf = Vec::new();
        ensemble_to_flowpack(&ens).write_to(&mut buf).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        let header: Value = serde_json::from_slice(&buf[..nl]).unwrap();
        assert_eq!(header["version"], 1);
        assert_eq!(header["kind"], "ensemble");
        assert_eq!(header["e"], 3);
        assert_eq!(header["nx"], 2);
        assert_eq!(buf.len() - nl - 1, 3 * 8 * 2 * 8);
        let first = f64::from_le_bytes(buf[nl + 1..nl + 9].try_into().unwrap());
        assert_eq!(first, 0.0);
    }

    #[test]
    fn rejects_length_mismatch() {
        let ens = small_ensemble();
        let mut pack = ensemble_to_flowpack(&ens);
        pack.payload.pop();
        pack.payload.pop();
        let back = roundtrip(&pack).unwrap();
        assert!(matches!(decode_value(&back), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn rejects_other_versions() {
        let g = build_grid((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), 1, 1, 1).unwrap();
        let mut pack = field_to_flowpack(&GriddedField::zeros(g));
        pack.header.version = 2;
        let mut buf = Vec::new();
        pack.write_to(&mut buf).unwrap();
        assert!(matches!(
            Flowpack::read_from(buf.as_slice()),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn rejects_malformed_header_and_nan() {
        assert!(matches!(
            Flowpack::read_from(&b"{not json\n"[..]),
            Err(Error::Format(_))
        ));
        assert!(Flowpack::read_from(&b"{\"version\":1,\"kind\":\"field\"}"[..]).is_err());
        let mut bytes = b"{\"version\":1,\"kind\":\"field\",\"nx\":1,\"ny\":1,\"nz\":1,\"x0\":0.0,\"dx\":0.0,\"y0\":0.0,\"dy\":0.0,\"z0\":0.0,\"dz\":0.0}\n".to_vec();
        bytes.extend_from_slice(&f64::NAN.to_le_bytes());
        bytes.extend_from_slice(&0f64.to_le_bytes());
        assert!(matches!(
            Flowpack::read_from(bytes.as_slice()),
            Err(Error::NonFinite(_))
        ));
    }

    proptest! {
        #[test]
        fn field_roundtrip(
            values in proptest::collection::vec(-1e3f64..1e3, 2 * 3 * 2 * 2),
            x0 in -1e5f64..1e5,
            dz in 0.1f64..300.0,
        ) {
            let g = Grid3D::new([3, 2, 2], [x0, 0.25, 2.5], [1234.5678, 0.1, dz]).unwrap();
            let f = GriddedField::from_interleaved(g, &values).unwrap();
            let back = decode_value(&roundtrip(&field_to_flowpack(&f)).unwrap()).unwrap();
            prop_assert_eq!(back, FlowpackValue::Field(f));
        }
    }
}
