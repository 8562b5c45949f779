//! `CAVOL1` volume files and `CATIS1` tissue-map files.
//!
//! Volume layout: one UTF-8 header line `CAVOL1 nx ny nz voxel_mm\n`, then
//! `nx*ny*nz` little-endian IEEE-754 float64 values, x-fastest.
//!
//! Tissue layout: header `CATIS1 nx ny nz voxel_mm\n`, `nx*ny*nz` uint8
//! labels, then one JSON line mapping label codes to class names.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::grid::{GridDims, TissueMap, Volume};

pub const VOLUME_MAGIC: &str = "CAVOL1";
pub const TISSUE_MAGIC: &str = "CATIS1";

fn header_line(magic: &str, dims: &GridDims) -> String {
    // `{}` on f64 prints the shortest string that parses back to the same bits.
    format!(
        "{magic} {} {} {} {}\n",
        dims.nx, dims.ny, dims.nz, dims.voxel_mm
    )
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(GridDims, &'a [u8]), FormatError> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| FormatError::MalformedHeader("missing header newline".into()))?;
    let line = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| FormatError::MalformedHeader("header is not UTF-8".into()))?;
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 5 {
        return Err(FormatError::MalformedHeader(format!(
            "expected 5 header fields, found {}",
            fields.len()
        )));
    }
    if fields[0] != magic {
        return Err(FormatError::MalformedHeader(format!(
            "expected magic {magic}, found {:?}",
            fields[0]
        )));
    }
    let parse_dim = |s: &str| -> Result<usize, FormatError> {
        s.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| FormatError::MalformedHeader(format!("invalid dimension {s:?}")))
    };
    let nx = parse_dim(fields[1])?;
    let ny = parse_dim(fields[2])?;
    let nz = parse_dim(fields[3])?;
    let voxel_mm: f64 = fields[4]
        .parse()
        .ok()
        .filter(|v: &f64| v.is_finite() && *v > 0.0)
        .ok_or_else(|| {
            FormatError::MalformedHeader(format!("invalid voxel size {:?}", fields[4]))
        })?;
    let dims = GridDims {
        nx,
        ny,
        nz,
        voxel_mm,
    };
    Ok((dims, &bytes[newline + 1..]))
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let header = header_line(VOLUME_MAGIC, volume.dims());
    let mut out = Vec::with_capacity(header.len() + 8 * volume.len());
    out.extend_from_slice(header.as_bytes());
    for v in volume.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume, FormatError> {
    let (dims, payload) = parse_header(bytes, VOLUME_MAGIC)?;
    let expected = dims
        .len()
        .checked_mul(8)
        .ok_or_else(|| FormatError::MalformedHeader("grid too large".into()))?;
    if payload.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(FormatError::DimensionMismatch {
            declared: dims.len(),
            found: payload.len(),
        });
    }
    let mut values = Vec::with_capacity(dims.len());
    for (idx, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        if !v.is_finite() {
            return Err(FormatError::NonFinite(idx));
        }
        values.push(v);
    }
    Ok(Volume::from_vec_unchecked(dims, values))
}

pub fn encode_tissue(map: &TissueMap) -> Result<Vec<u8>> {
    let header = header_line(TISSUE_MAGIC, map.dims());
    let mut out = Vec::with_capacity(header.len() + map.labels().len() + 128);
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(map.labels());
    let table: BTreeMap<String, &String> = map
        .classes()
        .iter()
        .map(|(code, name)| (code.to_string(), name))
        .collect();
    serde_json::to_writer(&mut out, &table)?;
    out.push(b'\n');
    Ok(out)
}

pub fn decode_tissue(bytes: &[u8]) -> Result<TissueMap, FormatError> {
    let (dims, rest) = parse_header(bytes, TISSUE_MAGIC)?;
    let n = dims.len();
    if rest.len() < n {
        return Err(FormatError::Truncated {
            expected: n,
            found: rest.len(),
        });
    }
    let (labels, table) = rest.split_at(n);
    let table = table
        .strip_suffix(b"\n")
        .ok_or_else(|| FormatError::ClassTable("missing trailing class-table line".into()))?;
    let parsed: BTreeMap<String, String> =
        serde_json::from_slice(table).map_err(|e| FormatError::ClassTable(e.to_string()))?;
    let mut classes = BTreeMap::new();
    for (code, name) in parsed {
        let code: u8 = code
            .parse()
            .map_err(|_| FormatError::ClassTable(format!("invalid class code {code:?}")))?;
        classes.insert(code, name);
    }
    TissueMap::new(dims, labels.to_vec(), classes)
        .map_err(|e| FormatError::ClassTable(e.to_string()))
}

fn with_path(path: &Path) -> impl FnOnce(FormatError) -> Error + '_ {
    move |source| Error::Format {
        path: Some(path.to_path_buf()),
        source,
    }
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let mut file = fs::File::create(path.as_ref())?;
    file.write_all(&encode_volume(volume))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_volume(&bytes).map_err(with_path(path))
}

pub fn write_tissue(path: impl AsRef<Path>, map: &TissueMap) -> Result<()> {
    fs::write(path, encode_tissue(map)?)?;
    Ok(())
}

pub fn read_tissue(path: impl AsRef<Path>) -> Result<TissueMap> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_tissue(&bytes).map_err(with_path(path))
}
