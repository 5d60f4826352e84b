//! Chunked streaming reduction of tensor payloads.
//!
//! The selected byte span is cut into fixed `CHUNK_BYTES` pieces. Chunks may
//! be read and reduced on any rayon worker, but their stats are always folded
//! left in ascending chunk order, so the result does not depend on the
//! number of workers.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom};

use rayon::prelude::*;

use super::dtype::decode_into;
use super::{CheckpointHandle, RowRange, StreamStats, TensorHandle};
use crate::error::{Error, Result};

/// Size of one streaming chunk in bytes. A multiple of every element width.
pub const CHUNK_BYTES: usize = 8 * 1024 * 1024;

/// Byte span `(offset_in_data_region, len)` and first flat element index of
/// the selected rows.
fn selected_span(handle: &TensorHandle, region: Option<RowRange>) -> Result<(u64, u64, u64)> {
    let Some(region) = region else {
        return Ok((handle.byte_range.0, handle.byte_len(), 0));
    };
    let rows = handle
        .shape
        .first()
        .copied()
        .ok_or_else(|| Error::InvalidRegion {
            tensor: handle.name.clone(),
            start: region.start,
            end: region.end,
            rows: 0,
        })?;
    if region.start > region.end || region.end > rows {
        return Err(Error::InvalidRegion {
            tensor: handle.name.clone(),
            start: region.start,
            end: region.end,
            rows,
        });
    }
    let row_elems: u64 = handle.shape[1..].iter().map(|&d| d as u64).product();
    let elem = handle.dtype.byte_size() as u64;
    let first = region.start as u64 * row_elems;
    let count = region.len() as u64 * row_elems;
    Ok((handle.byte_range.0 + first * elem, count * elem, first))
}

/// Streams the selected elements of `name` into a [`StreamStats`].
///
/// Fails with `NonFiniteEncountered` on the first NaN or infinity, reporting
/// its flat index within the whole tensor.
pub fn tensor_stats(ckpt: &CheckpointHandle, name: &str, region: Option<RowRange>) -> Result<StreamStats> {
    tensor_stats_chunked(ckpt, name, region, CHUNK_BYTES)
}

pub(crate) fn tensor_stats_chunked(
    ckpt: &CheckpointHandle,
    name: &str,
    region: Option<RowRange>,
    chunk_bytes: usize,
) -> Result<StreamStats> {
    let handle = ckpt.tensor(name)?;
    let elem = handle.dtype.byte_size();
    assert!(chunk_bytes >= elem && chunk_bytes.is_multiple_of(elem));
    let (offset, len, first_elem) = selected_span(handle, region)?;
    let shard = &ckpt.shards()[handle.shard];
    let base = shard.data_start + offset;
    let n_chunks = len.div_ceil(chunk_bytes as u64);

    let per_chunk: Vec<Result<StreamStats>> = (0..n_chunks)
        .into_par_iter()
        .map(|i| {
            let start = i * chunk_bytes as u64;
            let size = (len - start).min(chunk_bytes as u64) as usize;
            let mut file = File::open(&shard.path).map_err(|e| Error::io(&shard.path, e))?;
            file.seek(SeekFrom::Start(base + start))
                .map_err(|e| Error::io(&shard.path, e))?;
            let mut bytes = vec![0u8; size];
            file.read_exact(&mut bytes)
                .map_err(|e| Error::io(&shard.path, e))?;
            let mut values = Vec::new();
            decode_into(&bytes, handle.dtype, &mut values);
            if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteEncountered {
                    name: handle.name.clone(),
                    index: first_elem + start / elem as u64 + pos as u64,
                });
            }
            Ok(StreamStats::from_slice(&values))
        })
        .collect();

    per_chunk
        .into_iter()
        .try_fold(StreamStats::EMPTY, |acc, s| Ok(acc.merge(&s?)))
}

/// Bessel-corrected sample standard deviation of the selected elements,
/// accumulated in `f64`.
pub fn tensor_std(ckpt: &CheckpointHandle, name: &str, region: Option<RowRange>) -> Result<f64> {
    let stats = tensor_stats(ckpt, name, region)?;
    stats.sample_std().ok_or_else(|| Error::DegenerateTensor {
        name: name.to_string(),
        count: stats.count(),
    })
}

/// Decoded values of the selected elements, in storage order. Loads the
/// whole selection into memory; no finiteness check.
pub fn tensor_values(ckpt: &CheckpointHandle, name: &str, region: Option<RowRange>) -> Result<Vec<f64>> {
    let handle = ckpt.tensor(name)?;
    let (offset, len, _) = selected_span(handle, region)?;
    let shard = &ckpt.shards()[handle.shard];
    let mut file = File::open(&shard.path).map_err(|e| Error::io(&shard.path, e))?;
    file.seek(SeekFrom::Start(shard.data_start + offset))
        .map_err(|e| Error::io(&shard.path, e))?;
    let mut bytes = vec![0u8; len as usize];
    file.read_exact(&mut bytes)
        .map_err(|e| Error::io(&shard.path, e))?;
    let mut values = Vec::with_capacity(bytes.len() / handle.dtype.byte_size());
    decode_into(&bytes, handle.dtype, &mut values);
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{write_safetensors, TensorData};
    use crate::tensor_store::{open_checkpoint, DType};

    fn checkpoint(tensors: Vec<TensorData>) -> (tempfile::TempDir, CheckpointHandle) {
        let dir = tempfile::tempdir().unwrap();
        write_safetensors(&dir.path().join("model.safetensors"), &tensors).unwrap();
        let ckpt = open_checkpoint(dir.path()).unwrap();
        (dir, ckpt)
    }

    fn oracle_std(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    #[test]
    fn closed_form_examples() {
        let (_d, ckpt) = checkpoint(vec![
            TensorData::new("a", DType::F32, vec![4], vec![1.0, 2.0, 3.0, 4.0]),
            TensorData::new("c", DType::F32, vec![2, 3], vec![7.0; 6]),
            TensorData::new("pm", DType::F64, vec![2], vec![-1.0, 1.0]),
        ]);
        assert!((tensor_std(&ckpt, "a", None).unwrap() - 1.2909944487358056).abs() < 1e-12);
        assert_eq!(tensor_std(&ckpt, "c", None).unwrap(), 0.0);
        assert!((tensor_std(&ckpt, "pm", None).unwrap() - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn error_paths() {
        let (_d, ckpt) = checkpoint(vec![
            TensorData::new("one", DType::F32, vec![1], vec![3.0]),
            TensorData::new("nan", DType::BF16, vec![2, 2], vec![0.0, 1.0, f64::NAN, 2.0]),
            TensorData::new("m", DType::F32, vec![3, 2], vec![1.0; 6]),
        ]);
        assert!(matches!(
            tensor_std(&ckpt, "nope", None),
            Err(Error::TensorNotFound(_))
        ));
        assert!(matches!(
            tensor_std(&ckpt, "one", None),
            Err(Error::DegenerateTensor { count: 1, .. })
        ));
        match tensor_std(&ckpt, "nan", None) {
            Err(Error::NonFiniteEncountered { name, index }) => {
                assert_eq!(name, "nan");
                assert_eq!(index, 2);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            tensor_std(&ckpt, "m", Some(RowRange::new(2, 4))),
            Err(Error::InvalidRegion { rows: 3, .. })
        ));
    }

    #[test]
    fn row_region_selects_rows() {
        let vals: Vec<f64> = (0..12).map(|i| (i * i) as f64).collect();
        let (_d, ckpt) = checkpoint(vec![TensorData::new("m", DType::F64, vec![4, 3], vals.clone())]);
        let got = tensor_std(&ckpt, "m", Some(RowRange::new(1, 3))).unwrap();
        assert!((got - oracle_std(&vals[3..9])).abs() < 1e-12);
    }

    #[test]
    fn values_of_region() {
        let vals: Vec<f64> = (0..12).map(|i| i as f64 - 5.5).collect();
        let (_d, ckpt) = checkpoint(vec![TensorData::new("m", DType::F16, vec![4, 3], vals.clone())]);
        assert_eq!(tensor_values(&ckpt, "m", None).unwrap(), vals);
        assert_eq!(
            tensor_values(&ckpt, "m", Some(RowRange::new(3, 4))).unwrap(),
            vals[9..]
        );
    }

    #[test]
    fn chunk_size_does_not_change_result_beyond_rounding() {
        let vals: Vec<f64> = (0..1000)
            .map(|i| ((i * 7919) % 1013) as f64 * 0.01 - 3.0)
            .collect();
        let (_d, ckpt) = checkpoint(vec![TensorData::new("t", DType::F32, vec![1000], vals)]);
        let whole = tensor_stats_chunked(&ckpt, "t", None, CHUNK_BYTES).unwrap();
        for chunk in [4, 12, 400, 4000] {
            let s = tensor_stats_chunked(&ckpt, "t", None, chunk).unwrap();
            assert_eq!(s.count(), 1000);
            let rel = (s.sample_std().unwrap() / whole.sample_std().unwrap() - 1.0).abs();
            assert!(rel < 1e-13, "chunk {chunk}: {rel}");
        }
    }

    #[test]
    fn non_finite_index_is_global_across_chunks() {
        let mut vals = vec![0.5; 100];
        vals[73] = f64::INFINITY;
        let (_d, ckpt) = checkpoint(vec![TensorData::new("t", DType::F32, vec![10, 10], vals)]);
        match tensor_stats_chunked(&ckpt, "t", Some(RowRange::new(5, 10)), 16) {
            Err(Error::NonFiniteEncountered { index, .. }) => assert_eq!(index, 73),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn worker_count_is_bit_identical() {
        let vals: Vec<f64> = (0..50_000).map(|i| ((i as f64) * 0.37).sin()).collect();
        let (_d, ckpt) = checkpoint(vec![TensorData::new("t", DType::F32, vec![50_000], vals)]);
        let run = |workers| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap()
                .install(|| tensor_stats_chunked(&ckpt, "t", None, 4096).unwrap())
        };
        let one = run(1);
        for k in [2, 4, 8] {
            let s = run(k);
            assert_eq!(s.mean().to_bits(), one.mean().to_bits());
            assert_eq!(s.m2().to_bits(), one.m2().to_bits());
        }
    }
}
