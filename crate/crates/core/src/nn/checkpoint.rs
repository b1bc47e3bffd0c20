//! Binary checkpoint format.
//!
//! ```text
//! magic "SGNT" | version u32 | config hash u64 | input c,h,w u32 x3 | layer count u32
//! per layer: kind u8 | hyperparameter count u32 | u32 values
//!            | tensor count u32 | per tensor: rank u32, dims u32..., f32 LE payload
//! trailer:   extra section length u64 | opaque bytes (optimizer state, may be empty)
//! ```
//! Kind tags: 1 conv, 2 max-pool, 3 fully connected, 4 relu, 5 batch norm,
//! 6 softmax head, 7 sigmoid head. Heads come last. All integers little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::io::{read_tensor, read_u32, read_u64, read_u8, write_tensor};
use crate::nn::batchnorm::BatchNorm;
use crate::nn::conv::Conv2d;
use crate::nn::linear::Linear;
use crate::nn::network::{Architecture, Layer, Network};
use crate::nn::pool::MaxPool2d;
use crate::nn::LayerSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGNT";
pub const VERSION: u32 = 1;

const KIND_CONV: u8 = 1;
const KIND_POOL: u8 = 2;
const KIND_FC: u8 = 3;
const KIND_RELU: u8 = 4;
const KIND_BN: u8 = 5;
const KIND_SOFTMAX: u8 = 6;
const KIND_SIGMOID: u8 = 7;

pub struct Checkpoint {
    pub config_hash: u64,
    pub network: Network<f32>,
    pub extra: Vec<u8>,
}

fn put_layer<W: Write>(
    w: &mut W,
    kind: u8,
    hyper: &[usize],
    tensors: &[&Tensor<f32>],
) -> Result<()> {
    w.write_all(&[kind])?;
    w.write_all(&(hyper.len() as u32).to_le_bytes())?;
    for &h in hyper {
        w.write_all(&(h as u32).to_le_bytes())?;
    }
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    net: &Network<f32>,
    config_hash: u64,
    extra: &[u8],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    for d in net.arch.input {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let heads = net.user_head.is_some() as usize + net.forgery_head.is_some() as usize;
    w.write_all(&((net.layers.len() + heads) as u32).to_le_bytes())?;
    for layer in &net.layers {
        match layer {
            Layer::Conv(c) => {
                let mut ts = vec![&c.weight];
                ts.extend(c.bias.as_ref());
                put_layer(
                    w,
                    KIND_CONV,
                    &[c.out_channels, c.kernel, c.stride, c.pad],
                    &ts,
                )?;
            }
            Layer::MaxPool(p) => put_layer(w, KIND_POOL, &[p.size, p.stride], &[])?,
            Layer::Linear(fc) => {
                let mut ts = vec![&fc.weight];
                ts.extend(fc.bias.as_ref());
                put_layer(w, KIND_FC, &[fc.out_features], &ts)?;
            }
            Layer::BatchNorm(bn) => put_layer(
                w,
                KIND_BN,
                &[bn.channels],
                &[&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var],
            )?,
            Layer::Relu => put_layer(w, KIND_RELU, &[], &[])?,
        }
    }
    if let Some(h) = &net.user_head {
        put_layer(
            w,
            KIND_SOFTMAX,
            &[h.out_features],
            &[&h.weight, h.bias.as_ref().expect("head bias")],
        )?;
    }
    if let Some(h) = &net.forgery_head {
        put_layer(
            w,
            KIND_SIGMOID,
            &[h.out_features],
            &[&h.weight, h.bias.as_ref().expect("head bias")],
        )?;
    }
    w.write_all(&(extra.len() as u64).to_le_bytes())?;
    w.write_all(extra)?;
    Ok(())
}

struct RawLayer {
    kind: u8,
    hyper: Vec<usize>,
    tensors: Vec<Tensor<f32>>,
}

fn get_layer<R: Read>(r: &mut R) -> Result<RawLayer> {
    let kind = read_u8(r)?;
    let nh = read_u32(r)? as usize;
    if nh > 16 {
        return Err(Error::Format(format!("{nh} hyperparameters in one layer")));
    }
    let hyper = (0..nh)
        .map(|_| read_u32(r).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let nt = read_u32(r)? as usize;
    if nt > 8 {
        return Err(Error::Format(format!("{nt} tensors in one layer")));
    }
    let tensors = (0..nt).map(|_| read_tensor(r)).collect::<Result<_>>()?;
    Ok(RawLayer {
        kind,
        hyper,
        tensors,
    })
}

fn expect_shape(t: &Tensor<f32>, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "tensor shape {:?}, expected {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a network checkpoint".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version}")));
    }
    let config_hash = read_u64(r)?;
    let input = [
        read_u32(r)? as usize,
        read_u32(r)? as usize,
        read_u32(r)? as usize,
    ];
    let count = read_u32(r)? as usize;
    let raw: Vec<RawLayer> = (0..count).map(|_| get_layer(r)).collect::<Result<_>>()?;

    let mut specs = Vec::new();
    let mut user_classes = None;
    let mut forgery_head = false;
    for l in &raw {
        let h = |i: usize| {
            l.hyper.get(i).copied().ok_or_else(|| {
                Error::Format(format!("layer kind {} missing hyperparameter", l.kind))
            })
        };
        match l.kind {
            KIND_CONV => specs.push(LayerSpec::Conv {
                filters: h(0)?,
                kernel: h(1)?,
                stride: h(2)?,
                pad: h(3)?,
            }),
            KIND_POOL => specs.push(LayerSpec::MaxPool {
                size: h(0)?,
                stride: h(1)?,
            }),
            KIND_FC => specs.push(LayerSpec::FullyConnected { units: h(0)? }),
            KIND_RELU => specs.push(LayerSpec::Relu),
            KIND_BN => specs.push(LayerSpec::BatchNorm),
            KIND_SOFTMAX => user_classes = Some(h(0)?),
            KIND_SIGMOID => forgery_head = true,
            k => return Err(Error::Format(format!("unknown layer kind {k}"))),
        }
    }
    let arch = Architecture {
        input,
        layers: specs,
        user_classes,
        forgery_head,
    };
    let mut net = Network::<f32>::new(arch)?;

    let mut raw = raw.into_iter();
    for layer in &mut net.layers {
        let l = raw.next().expect("layer count");
        let mut ts = l.tensors.into_iter();
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let t = ts
                .next()
                .ok_or_else(|| Error::Format("missing parameter tensor".into()))?;
            expect_shape(&t, shape)?;
            Ok(t)
        };
        match layer {
            Layer::Conv(Conv2d { weight, bias, .. })
            | Layer::Linear(Linear { weight, bias, .. }) => {
                *weight = take(weight.shape())?;
                if let Some(b) = bias {
                    *b = take(b.shape())?;
                }
            }
            Layer::BatchNorm(BatchNorm {
                channels,
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            }) => {
                let c = [*channels];
                *gamma = take(&c)?;
                *beta = take(&c)?;
                *running_mean = take(&c)?;
                *running_var = take(&c)?;
            }
            Layer::MaxPool(MaxPool2d { .. }) | Layer::Relu => {}
        }
    }
    for head in net.user_head.iter_mut().chain(net.forgery_head.iter_mut()) {
        let l = raw.next().expect("head count");
        let mut ts = l.tensors.into_iter();
        let w = ts
            .next()
            .ok_or_else(|| Error::Format("missing head weight".into()))?;
        let b = ts
            .next()
            .ok_or_else(|| Error::Format("missing head bias".into()))?;
        expect_shape(&w, head.weight.shape())?;
        expect_shape(&b, &[head.out_features])?;
        head.weight = w;
        head.bias = Some(b);
    }

    let extra_len = read_u64(r)? as usize;
    let mut extra = Vec::new();
    r.take(extra_len as u64).read_to_end(&mut extra)?;
    if extra.len() != extra_len {
        return Err(Error::Format("truncated checkpoint trailer".into()));
    }
    Ok(Checkpoint {
        config_hash,
        network: net,
        extra,
    })
}
