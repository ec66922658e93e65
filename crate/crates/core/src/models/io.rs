//! Binary parameter files.
//!
//! Layout (all integers little-endian `u32`):
//! magic `FENS1`, descriptor length + UTF-8 descriptor, tensor count, then per
//! tensor: name length + name bytes, rank, dims, and the values as
//! little-endian `f32`.

use std::io::{Read, Write};

use super::{AggregatorKind, AggregatorSpec, CompetencyMatrix, LocalModel};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const MAGIC: &[u8; 5] = b"FENS1";

pub(crate) fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub(crate) fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let n = get_u32(r)?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("name is not UTF-8".into()))
}

pub(crate) fn put_shape<W: Write>(w: &mut W, shape: &[usize]) -> Result<()> {
    put_u32(w, shape.len())?;
    shape.iter().try_for_each(|&d| put_u32(w, d))
}

pub(crate) fn get_shape<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let rank = get_u32(r)?;
    (0..rank).map(|_| get_u32(r)).collect()
}

pub(crate) fn check_magic<R: Read>(r: &mut R, magic: &[u8]) -> Result<()> {
    let mut m = vec![0u8; magic.len()];
    r.read_exact(&mut m)?;
    if m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub fn write_params<W: Write>(w: &mut W, descriptor: &str, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    put_str(w, descriptor)?;
    put_u32(w, params.len())?;
    for (name, t) in params.iter() {
        put_str(w, name)?;
        put_shape(w, t.shape())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<(String, ParamSet)> {
    check_magic(r, MAGIC)?;
    let descriptor = get_str(r)?;
    let count = get_u32(r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = get_str(r)?;
        let shape = get_shape(r)?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok((descriptor, params))
}

/// `mlp:20,64,10`
pub fn mlp_descriptor(arch: &[usize]) -> String {
    let widths: Vec<String> = arch.iter().map(usize::to_string).collect();
    format!("mlp:{}", widths.join(","))
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Format(format!("bad width {v:?}"))))
        .collect()
}

pub fn save_model(path: impl AsRef<std::path::Path>, model: &LocalModel) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(&mut f, &mlp_descriptor(&model.arch), &model.params)?;
    f.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<std::path::Path>) -> Result<LocalModel> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (desc, params) = read_params(&mut f)?;
    let arch = desc
        .strip_prefix("mlp:")
        .ok_or_else(|| Error::Format(format!("not a local model: {desc}")))
        .and_then(parse_usize_list)?;
    LocalModel::from_params(arch, params)
}

/// `agg:<kind>;m=<M>;c=<C>;hidden=<k>;d=<d>`. Vote competency matrices are
/// stored as tensors `competency.<i>` and the prior as `prior`.
pub fn aggregator_descriptor(spec: &AggregatorSpec) -> String {
    format!(
        "agg:{};m={};c={};hidden={};d={}",
        spec.kind, spec.num_clients, spec.num_classes, spec.hidden, spec.input_dim
    )
}

pub fn write_aggregator<W: Write>(w: &mut W, spec: &AggregatorSpec) -> Result<()> {
    let mut p = spec.params.clone();
    for (i, cm) in spec.competency.iter().enumerate() {
        p.insert(format!("competency.{i}"), cm.p.clone())?;
    }
    if !spec.prior.is_empty() {
        p.insert(
            "prior",
            Tensor::vector(spec.prior.iter().map(|&v| v as f32).collect()),
        )?;
    }
    write_params(w, &aggregator_descriptor(spec), &p)
}

pub fn read_aggregator<R: Read>(r: &mut R) -> Result<AggregatorSpec> {
    let (desc, all) = read_params(r)?;
    let body = desc
        .strip_prefix("agg:")
        .ok_or_else(|| Error::Format(format!("not an aggregator: {desc}")))?;
    let mut parts = body.split(';');
    let kind: AggregatorKind = parts
        .next()
        .unwrap_or_default()
        .parse()
        .map_err(|_| Error::Format(format!("bad aggregator kind in {desc}")))?;
    let mut field = |key: &str| -> Result<usize> {
        parts
            .next()
            .and_then(|p| p.strip_prefix(key))
            .and_then(|v| v.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("missing {key} in {desc}")))
    };
    let (m, c, hidden, d) = (field("m")?, field("c")?, field("hidden")?, field("d")?);
    let mut spec = AggregatorSpec::average(m, c)?;
    spec.kind = kind;
    spec.hidden = hidden;
    spec.input_dim = d;
    for (name, t) in all.iter() {
        if name.starts_with("competency.") {
            spec.competency.push(CompetencyMatrix::new(t.clone())?);
        } else if name == "prior" {
            spec.prior = t.data().iter().map(|&v| v as f64).collect();
        } else {
            spec.params.insert(name.clone(), t.clone())?;
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut r = crate::rng::stream(0, "t", 0);
        let m = LocalModel::init(vec![3, 5, 2], &mut r).unwrap();
        save_model(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"FENS1");
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn aggregator_roundtrip() {
        let mut r = crate::rng::stream(0, "t", 0);
        let nn = AggregatorSpec::nn(3, 2, 8, &mut r).unwrap();
        let mut buf = Vec::new();
        write_aggregator(&mut buf, &nn).unwrap();
        assert_eq!(read_aggregator(&mut buf.as_slice()).unwrap(), nn);

        let cm = super::super::competency_from_votes(&[0, 1], &[0, 1], 2, 1e-3).unwrap();
        let vote = AggregatorSpec::vote(vec![cm.clone(), cm], 2).unwrap();
        let mut buf = Vec::new();
        write_aggregator(&mut buf, &vote).unwrap();
        let back = read_aggregator(&mut buf.as_slice()).unwrap();
        assert_eq!(back.competency, vote.competency);
        assert_eq!(back.kind, AggregatorKind::Vote);
    }

    #[test]
    fn rejects_wrong_magic() {
        let mut bytes = b"FENSX".to_vec();
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(read_params(&mut bytes.as_slice()), Err(Error::Format(_))));
    }
}
