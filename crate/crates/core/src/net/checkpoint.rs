//! Model checkpoint: magic, little-endian u64 JSON length, JSON header
//! (`NetSpec` plus batch-norm readiness), u32 tensor count, then each tensor as
//! u32 rank, u32 extents and little-endian f32 values in declaration order.
//! Batch-norm running statistics follow gamma/beta inside each block.

use std::io::{Read, Write};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::model::PixelNet;
use super::spec::NetSpec;
use super::tensor::Tensor;
use super::NetError;

pub const NET_MAGIC: &[u8; 8] = b"GKNET\x00\x01\x00";

/// Writes `(json header, tensors)` in the shared container layout.
pub fn write_container<W: Write>(mut w: W, magic: &[u8; 8], header: &[u8], tensors: &[&Tensor]) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.values() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NetError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a container written by [`write_container`]; returns the JSON header bytes and tensors.
pub fn read_container<R: Read>(mut r: R, magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<Tensor>), NetError> {
    let io = |e: std::io::Error| NetError::Checkpoint(e.to_string());
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(io)?;
    if &m != magic {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(NetError::Checkpoint("header length is implausible".into()));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(io)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(NetError::Checkpoint(format!("tensor rank {rank} is implausible")));
        }
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(io)?;
        let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        tensors.push(Tensor::new(shape, vals)?);
    }
    Ok((header, tensors))
}

#[derive(Serialize, Deserialize)]
struct NetHeader {
    net_spec: NetSpec,
    bn_ready: bool,
}

fn state_tensors(net: &PixelNet) -> Vec<Tensor> {
    let mut out = Vec::new();
    for b in &net.blocks {
        out.push(b.conv_w.clone());
        out.push(b.conv_b.clone());
        if let Some(bn) = &b.bn {
            out.push(bn.gamma.clone());
            out.push(bn.beta.clone());
            out.push(Tensor::new(vec![bn.running_mean.len()], bn.running_mean.clone()).expect("1D"));
            out.push(Tensor::new(vec![bn.running_var.len()], bn.running_var.clone()).expect("1D"));
        }
    }
    for d in &net.mlp {
        out.push(d.w.clone());
        out.push(d.b.clone());
    }
    out
}

pub fn save_net<W: Write>(net: &PixelNet, w: W) -> Result<(), NetError> {
    let header = serde_json::to_vec(&NetHeader {
        net_spec: net.spec().clone(),
        bn_ready: net.bn_ready(),
    })
    .map_err(|e| NetError::Checkpoint(e.to_string()))?;
    let tensors = state_tensors(net);
    let refs: Vec<&Tensor> = tensors.iter().collect();
    write_container(w, NET_MAGIC, &header, &refs).map_err(|e| NetError::Checkpoint(e.to_string()))
}

pub fn load_net<R: Read>(r: R) -> Result<PixelNet, NetError> {
    let (header, tensors) = read_container(r, NET_MAGIC)?;
    let header: NetHeader = serde_json::from_slice(&header).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    // Any RNG works: every value is overwritten below.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut net = PixelNet::new(header.net_spec, &mut rng)?;
    let expected = state_tensors(&net);
    if expected.len() != tensors.len() {
        return Err(NetError::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    for (i, (e, t)) in expected.iter().zip(&tensors).enumerate() {
        if e.shape() != t.shape() {
            return Err(NetError::Checkpoint(format!(
                "tensor {i}: expected shape {:?}, found {:?}",
                e.shape(),
                t.shape()
            )));
        }
    }
    let mut it = tensors.into_iter();
    for b in &mut net.blocks {
        b.conv_w = it.next().unwrap();
        b.conv_b = it.next().unwrap();
        if let Some(bn) = b.bn.as_mut() {
            bn.gamma = it.next().unwrap();
            bn.beta = it.next().unwrap();
            bn.running_mean = it.next().unwrap().into_values();
            bn.running_var = it.next().unwrap().into_values();
            bn.initialized = header.bn_ready;
        }
    }
    for d in &mut net.mlp {
        d.w = it.next().unwrap();
        d.b = it.next().unwrap();
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_values_at_f32() {
        let mut net = PixelNet::new(NetSpec::toy(&[3, 2, 2], true, 5), &mut rand_chacha::ChaCha8Rng::seed_from_u64(9)).unwrap();
        net.blocks[0].bn.as_mut().unwrap().init_running_stats(vec![0.5, -1.0, 2.0], vec![1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        save_net(&net, &mut buf).unwrap();
        assert_eq!(&buf[..8], NET_MAGIC);
        let back = load_net(&buf[..]).unwrap();
        assert_eq!(back.spec(), net.spec());
        for ((_, a), (_, b)) in net.params().iter().zip(back.params()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert_eq!(back.blocks[0].bn.as_ref().unwrap().running_mean, vec![0.5, -1.0, 2.0]);
        assert!(!back.bn_ready(), "other layers never saw statistics");
    }

    #[test]
    fn rejects_garbage() {
        assert!(load_net(&b"not a checkpoint at all"[..]).is_err());
        let net = PixelNet::new(NetSpec::toy(&[2], false, 3), &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut buf = Vec::new();
        save_net(&net, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(load_net(&buf[..]).is_err());
    }
}
