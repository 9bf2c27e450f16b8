//! Weight checkpoint serialization.
//!
//! Layout (little-endian): magic `HLVW`, version `u16`, block count `u32`,
//! then per block a name (`u16` length + UTF-8 bytes), rank `u8`, extents as
//! `u32`s, and the values as `f32`s in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tape::Params;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"HLVW";
const VERSION: u16 = 1;

pub fn write_blocks(path: &Path, blocks: &[(String, Tensor<f32>)]) -> Result<()> {
    let ctx = path.display().to_string();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx.clone(), e))?);
    write_blocks_to(&mut w, &ctx, blocks)?;
    w.flush().map_err(|e| Error::io(ctx, e))
}

/// Stream form of [`write_blocks`], for embedding a block section inside a
/// larger container. `context` names the destination in error messages.
pub fn write_blocks_to(
    w: &mut impl Write,
    context: &str,
    blocks: &[(String, Tensor<f32>)],
) -> Result<()> {
    let ctx = || context.to_string();
    let io = |e| Error::io(ctx(), e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(blocks.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in blocks {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::invalid(ctx(), format!("block name too long: {name}")));
        }
        w.write_all(&(nb.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(nb).map_err(io)?;
        if t.rank() > u8::MAX as usize {
            return Err(Error::invalid(ctx(), format!("rank {} too large", t.rank())));
        }
        w.write_all(&[t.rank() as u8]).map_err(io)?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_blocks(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let ctx = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(ctx.clone(), e))?);
    read_blocks_from(&mut r, &ctx)
}

/// Stream form of [`read_blocks`].
pub fn read_blocks_from(r: &mut impl Read, context: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    let ctx = || context.to_string();
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, context, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            context: ctx(),
            what: "magic HLVW".into(),
            found: format!("{magic:?}"),
        });
    }
    let version = read_u16(r, context, "version")?;
    if version != VERSION {
        return Err(Error::Format {
            context: ctx(),
            what: format!("version {VERSION}"),
            found: version.to_string(),
        });
    }
    let count = read_u32(r, context, "block count")? as usize;
    let mut blocks = Vec::with_capacity(count);
    for bi in 0..count {
        let name_len = read_u16(r, context, "name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name, context, "block name")?;
        let name = String::from_utf8(name).map_err(|e| {
            Error::invalid(ctx(), format!("block {bi} name is not UTF-8: {e}"))
        })?;
        let mut rank = [0u8; 1];
        read_exact(r, &mut rank, context, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(r, context, "extent")? as usize);
        }
        let len: usize = shape.iter().product();
        let mut buf = vec![0u8; len * 4];
        read_exact(r, &mut buf, context, "values")?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blocks.push((name, Tensor::new(&shape, data)));
    }
    Ok(blocks)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], context: &str, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        context: context.to_string(),
        what: what.into(),
        found: format!("short read ({e})"),
    })
}

fn read_u16(r: &mut impl Read, context: &str, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, context, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, context: &str, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, context, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Every parameter of a component as named `f32` blocks.
pub fn collect_blocks<T: Scalar, P: Params<T> + ?Sized>(root: &P) -> Vec<(String, Tensor<f32>)> {
    let mut blocks: Vec<(String, Tensor<f32>)> = Vec::new();
    root.visit("", &mut |name, p| {
        blocks.push((name, p.value().cast::<f32>()));
    });
    blocks
}

/// Dump every parameter of a component (values converted to `f32`).
pub fn save_params<T: Scalar, P: Params<T> + ?Sized>(path: &Path, root: &P) -> Result<()> {
    write_blocks(path, &collect_blocks(root))
}

/// Load a checkpoint into a component. Every stored block must match a
/// parameter of the same name and shape, and every parameter must be covered.
pub fn load_params<T: Scalar, P: Params<T> + ?Sized>(path: &Path, root: &mut P) -> Result<()> {
    apply_blocks(&path.display().to_string(), read_blocks(path)?, root)
}

/// Install named blocks into a component under the cover/shape rules of
/// [`load_params`]. `context` names the source in error messages.
pub fn apply_blocks<T: Scalar, P: Params<T> + ?Sized>(
    context: &str,
    blocks: Vec<(String, Tensor<f32>)>,
    root: &mut P,
) -> Result<()> {
    let mut by_name: std::collections::BTreeMap<String, Tensor<f32>> =
        blocks.into_iter().collect();
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    root.visit_mut("", &mut |name, p| match by_name.remove(&name) {
        Some(t) => {
            if t.shape() != p.value().shape() {
                mismatched.push(format!(
                    "{name}: stored {:?}, expected {:?}",
                    t.shape(),
                    p.value().shape()
                ));
            } else {
                p.replace(t.cast::<T>());
            }
        }
        None => missing.push(name),
    });
    if missing.is_empty() && mismatched.is_empty() && by_name.is_empty() {
        return Ok(());
    }
    let mut expected = String::new();
    if !missing.is_empty() {
        expected.push_str(&format!("blocks for {missing:?}"));
    }
    if !mismatched.is_empty() {
        if !expected.is_empty() {
            expected.push_str("; ");
        }
        expected.push_str(&format!("matching shapes ({})", mismatched.join(", ")));
    }
    let extra: Vec<String> = by_name.into_keys().collect();
    let actual = if extra.is_empty() {
        format!("checkpoint {context}")
    } else {
        format!("checkpoint {context} with extra blocks {extra:?}")
    };
    Err(Error::ModelMismatch {
        expected: if expected.is_empty() { "exact parameter cover".into() } else { expected },
        actual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::{join, Parameter, Params};

    struct Toy {
        a: Parameter<f32>,
        b: Parameter<f32>,
    }

    impl Params<f32> for Toy {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter<f32>)) {
            f(join(prefix, "a"), &self.a);
            f(join(prefix, "b"), &self.b);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter<f32>)) {
            f(join(prefix, "a"), &mut self.a);
            f(join(prefix, "b"), &mut self.b);
        }
    }

    fn toy() -> Toy {
        Toy {
            a: Parameter::new(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.25, -0.5])),
            b: Parameter::new(Tensor::new(&[4], vec![9.0, 8.0, 7.0, 6.0])),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hlvw");
        let src = toy();
        save_params(&path, &src).unwrap();
        let mut dst = toy();
        dst.a.set(Tensor::zeros(&[2, 3]));
        dst.b.set(Tensor::zeros(&[4]));
        load_params(&path, &mut dst).unwrap();
        assert!(dst.a.value().bit_eq(src.a.value()));
        assert!(dst.b.value().bit_eq(src.b.value()));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hlvw");
        write_blocks(
            &path,
            &[
                ("a".into(), Tensor::new(&[6], vec![0.0; 6])),
                ("b".into(), Tensor::new(&[4], vec![0.0; 4])),
            ],
        )
        .unwrap();
        let err = load_params(&path, &mut toy()).unwrap_err();
        assert!(matches!(err, Error::ModelMismatch { .. }), "{err}");
    }

    #[test]
    fn missing_and_extra_blocks_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hlvw");
        write_blocks(
            &path,
            &[
                ("a".into(), Tensor::new(&[2, 3], vec![0.0; 6])),
                ("zzz".into(), Tensor::new(&[1], vec![0.0])),
            ],
        )
        .unwrap();
        let err = load_params(&path, &mut toy()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('b') && msg.contains("zzz"), "{msg}");
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hlvw");
        save_params(&path, &toy()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_blocks(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hlvw");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_blocks(&path).unwrap_err(), Error::Format { .. }));
    }
}
