//! MVT1 tensor files.
//!
//! Layout: `b"MVT1"`, one rank byte, `rank` little-endian `u32` dimensions,
//! then the row-major payload as little-endian IEEE-754 `f32`.

use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVT1";
pub const MAX_RANK: usize = 5;

pub fn encode(tensor: &Tensor<f32>) -> Result<Vec<u8>> {
    let rank = tensor.rank();
    if rank > MAX_RANK {
        return Err(CoreError::Shape(format!(
            "MVT1 supports rank <= {MAX_RANK}, got {rank}"
        )));
    }
    let mut out = Vec::with_capacity(5 + 4 * rank + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.push(rank as u8);
    for &d in tensor.shape() {
        let d = u32::try_from(d)
            .map_err(|_| CoreError::Shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in tensor.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 5 {
        return Err(CoreError::Format {
            offset: bytes.len(),
            reason: "truncated header".into(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(CoreError::Format {
            offset: 0,
            reason: format!("bad magic {:?}", &bytes[..4]),
        });
    }
    let rank = bytes[4] as usize;
    if rank > MAX_RANK {
        return Err(CoreError::Format {
            offset: 4,
            reason: format!("rank {rank} exceeds {MAX_RANK}"),
        });
    }
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(CoreError::Format {
            offset: bytes.len(),
            reason: "truncated dimensions".into(),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let at = 5 + 4 * i;
        let d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        count = count
            .checked_mul(d)
            .and_then(|c| c.checked_mul(4).map(|_| c))
            .ok_or_else(|| CoreError::Format {
                offset: at,
                reason: "dimension product overflows".into(),
            })?;
        shape.push(d);
    }
    let expected = header + 4 * count;
    if bytes.len() != expected {
        return Err(CoreError::Format {
            offset: bytes.len().min(expected),
            reason: format!(
                "payload holds {} bytes, shape {:?} needs {}",
                bytes.len() - header,
                shape,
                4 * count
            ),
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor)?;
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_matrix_round_trips() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.mvt");
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_vec(&[1, 2], vec![1.0f32, -2.5]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"MVT1");
        assert_eq!(b[4], 2);
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(&b[13..17], &1.0f32.to_le_bytes());
        assert_eq!(&b[17..21], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut b = encode(&Tensor::<f32>::zeros(&[2])).unwrap();
        b[0] = b'X';
        match decode(&b) {
            Err(CoreError::Format { offset: 0, .. }) => {}
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let b = encode(&Tensor::<f32>::zeros(&[4])).unwrap();
        assert!(matches!(
            decode(&b[..b.len() - 2]),
            Err(CoreError::Format { .. })
        ));
    }

    #[test]
    fn overflowing_dimensions_are_rejected() {
        let mut b = vec![];
        b.extend_from_slice(b"MVT1");
        b.push(3);
        for _ in 0..3 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode(&b), Err(CoreError::Format { .. })));
    }

    #[test]
    fn large_video_block_is_bit_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let shape = [4, 62, 64, 64, 3];
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let t = Tensor::from_vec(&shape, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mvt");
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.shape(), &shape);
        let a: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
        assert!(a == b);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor<f32>> {
        prop::collection::vec(1usize..5, 0..=5).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop::collection::vec(any::<u32>(), n).prop_map(move |bits| {
                let data = bits.into_iter().map(f32::from_bits).collect();
                Tensor::from_vec(&shape, data).unwrap()
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip_is_bit_exact(t in arb_tensor()) {
            let back = decode(&encode(&t).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
