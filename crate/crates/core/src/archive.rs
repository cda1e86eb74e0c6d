//! Named-array archives: a safetensors file whose metadata carries a JSON
//! header. Used for checkpoints, pretrained weights, synthetic datasets and
//! the preprocessing cache.

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamGroup};

const HEADER_KEY: &str = "fusehar_header";

#[derive(Debug, Clone, Default)]
pub struct NamedArrays {
    pub arrays: IndexMap<String, ArrayD<f64>>,
    pub header: Value,
}

pub fn write_archive(path: &Path, arrays: &IndexMap<String, ArrayD<f64>>, header: &Value) -> Result<()> {
    let bytes = encode(arrays, header)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode(arrays: &IndexMap<String, ArrayD<f64>>, header: &Value) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = arrays
        .iter()
        .map(|(k, a)| {
            let bytes = a.iter().flat_map(|v| v.to_le_bytes()).collect();
            (k.clone(), a.shape().to_vec(), bytes)
        })
        .collect();
    let views = raw
        .iter()
        .map(|(k, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Archive(format!("{k}: {e:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert(HEADER_KEY.to_string(), serde_json::to_string(header)?);
    safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Archive(format!("{e:?}")))
}

pub fn read_archive(path: &Path) -> Result<NamedArrays> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Archive(msg) => Error::Archive(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode(bytes: &[u8]) -> Result<NamedArrays> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Archive(format!("{e:?}")))?;
    let header = match meta.metadata().as_ref().and_then(|m| m.get(HEADER_KEY)) {
        Some(s) => serde_json::from_str(s)?,
        None => Value::Null,
    };
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Archive(format!("{e:?}")))?;
    let mut names: Vec<String> = st.names().into_iter().cloned().collect();
    names.sort();
    let mut arrays = IndexMap::new();
    for name in names {
        let view = st.tensor(&name).map_err(|e| Error::Archive(format!("{e:?}")))?;
        let values = to_f64(view.dtype(), view.data())
            .ok_or_else(|| Error::Archive(format!("tensor `{name}` has unsupported dtype {:?}", view.dtype())))?;
        let arr =
            ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| Error::Archive(format!("{name}: {e}")))?;
        arrays.insert(name, arr);
    }
    Ok(NamedArrays { arrays, header })
}

fn to_f64(dtype: Dtype, data: &[u8]) -> Option<Vec<f64>> {
    fn chunks<const N: usize>(data: &[u8]) -> impl Iterator<Item = [u8; N]> + '_ {
        data.chunks_exact(N).map(|c| c.try_into().expect("exact chunk"))
    }
    Some(match dtype {
        Dtype::F64 => chunks::<8>(data).map(f64::from_le_bytes).collect(),
        Dtype::F32 => chunks::<4>(data).map(|b| f32::from_le_bytes(b) as f64).collect(),
        Dtype::I64 => chunks::<8>(data).map(|b| i64::from_le_bytes(b) as f64).collect(),
        Dtype::I32 => chunks::<4>(data).map(|b| i32::from_le_bytes(b) as f64).collect(),
        Dtype::U8 => data.iter().map(|&b| b as f64).collect(),
        _ => return None,
    })
}

/// Flattens parameter groups into `{prefix}{group}.{tensor}` keys and returns
/// the group metadata (trainability, buffer names) for the header.
pub fn flatten_params(params: &ModelParams, prefix: &str, out: &mut IndexMap<String, ArrayD<f64>>) -> Value {
    let mut groups = serde_json::Map::new();
    for (gname, g) in params.groups() {
        for (t, a) in g.tensors.iter().chain(g.buffers.iter()) {
            out.insert(format!("{prefix}{gname}.{t}"), a.clone());
        }
        groups.insert(
            gname.clone(),
            json!({
                "trainable": g.trainable,
                "tensors": g.tensors.keys().collect::<Vec<_>>(),
                "buffers": g.buffers.keys().collect::<Vec<_>>(),
            }),
        );
    }
    Value::Object(groups)
}

/// Inverse of [`flatten_params`], driven by the group metadata.
pub fn unflatten_params(arrays: &IndexMap<String, ArrayD<f64>>, prefix: &str, groups: &Value) -> Result<ModelParams> {
    let groups = groups
        .as_object()
        .ok_or_else(|| Error::Archive("group metadata is not an object".into()))?;
    let mut params = ModelParams::new();
    for (gname, meta) in groups {
        let mut group = ParamGroup::new(meta["trainable"].as_bool().unwrap_or(true));
        for (field, is_buffer) in [("tensors", false), ("buffers", true)] {
            for t in meta[field].as_array().into_iter().flatten() {
                let t = t.as_str().unwrap_or_default();
                let key = format!("{prefix}{gname}.{t}");
                let arr = arrays.get(&key).cloned().ok_or(Error::MissingTensor(key))?;
                if is_buffer {
                    group.buffers.insert(t.to_string(), arr);
                } else {
                    group.tensors.insert(t.to_string(), arr);
                }
            }
        }
        let trainable = group.trainable;
        *params.group_or_insert(gname, trainable) = group;
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &ModelParams, mut header: Value) -> Result<()> {
    let mut arrays = IndexMap::new();
    let groups = flatten_params(params, "", &mut arrays);
    header["groups"] = groups;
    write_archive(path, &arrays, &header)
}

pub fn load_params(path: &Path) -> Result<(ModelParams, Value)> {
    let archive = read_archive(path)?;
    let params = unflatten_params(&archive.arrays, "", &archive.header["groups"])?;
    Ok((params, archive.header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_through_archive() {
        let mut p = ModelParams::new();
        let g = p.group_or_insert("Block_1", false);
        g.tensors
            .insert("conv.weight".into(), ArrayD::from_elem(IxDyn(&[2, 3]), 0.25));
        g.buffers
            .insert("bn.running_mean".into(), ArrayD::from_elem(IxDyn(&[2]), -1.5));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        save_params(&path, &p, json!({"seed": 7})).unwrap();
        let (back, header) = load_params(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(header["seed"], 7);
    }

    #[test]
    fn f32_tensors_are_widened() {
        let data: Vec<u8> = [1.5f32, -2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let view = TensorView::new(Dtype::F32, vec![2], &data).unwrap();
        let bytes = safetensors::serialize(vec![("x", view)], &None).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.arrays["x"].as_slice().unwrap(), &[1.5, -2.0]);
        assert!(back.header.is_null());
    }
}
