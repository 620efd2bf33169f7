//! Named f32 arrays in a safetensors container, plus string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

/// One stored array with its on-disk shape.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayStore {
    pub arrays: BTreeMap<String, StoredArray>,
    pub metadata: BTreeMap<String, String>,
}

impl ArrayStore {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .arrays
            .iter()
            .map(|(k, a)| (k.clone(), a.data.iter().flat_map(|v| v.to_le_bytes()).collect(), a.shape.clone()))
            .collect();
        let views = raw
            .iter()
            .map(|(k, bytes, shape)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::parse(k.clone(), format!("{e:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        let bytes =
            safetensors::serialize(views, &Some(meta)).map_err(|e| Error::parse("safetensors", format!("{e:?}")))?;
        canonical_header(bytes)
    }

    /// Decodes a container. F32 and F64 arrays are accepted; F64 values
    /// are narrowed.
    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let err = |e: safetensors::SafeTensorError| Error::parse(context, format!("{e:?}"));
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(err)?;
        let metadata = header.metadata().clone().unwrap_or_default().into_iter().collect();
        let st = SafeTensors::deserialize(bytes).map_err(err)?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            let raw = view.data();
            let data: Vec<f32> = match view.dtype() {
                Dtype::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")) as f32)
                    .collect(),
                other => {
                    return Err(Error::parse(context, format!("array {name} has unsupported dtype {other:?}")));
                }
            };
            arrays.insert(name, StoredArray { shape: view.shape().to_vec(), data });
        }
        Ok(Self { arrays, metadata })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }
}

/// Rewrites the JSON header with sorted keys; the serializer emits the
/// metadata map in hash order, which differs between processes.
fn canonical_header(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let err = |r: String| Error::parse("safetensors header", r);
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte prefix")) as usize;
    let mut header: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| err(e.to_string()))?;
    if let Some(meta) = header.get_mut("__metadata__") {
        let sorted: BTreeMap<String, String> = serde_json::from_value(meta.take()).map_err(|e| err(e.to_string()))?;
        *meta = serde_json::to_value(sorted).map_err(|e| err(e.to_string()))?;
    }
    let mut text = serde_json::to_vec(&header).map_err(|e| err(e.to_string()))?;
    text.resize(text.len().next_multiple_of(8), b' ');
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ArrayStore::default();
        s.arrays.insert(
            "a.weight".into(),
            StoredArray { shape: vec![2, 1, 3, 3], data: (0..18).map(|i| (i as f32).sin() * 1e-3).collect() },
        );
        s.arrays.insert("a.bias".into(), StoredArray { shape: vec![2], data: vec![f32::MIN_POSITIVE, -0.0] });
        s.metadata.insert("k".into(), "{\"x\": 1}".into());
        let back = ArrayStore::from_bytes(&s.to_bytes().unwrap(), "test").unwrap();
        assert_eq!(back.metadata, s.metadata);
        for (k, a) in &s.arrays {
            let b = &back.arrays[k];
            assert_eq!(a.shape, b.shape);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn bytes_do_not_depend_on_hash_order() {
        let mut s = ArrayStore::default();
        s.arrays.insert("w".into(), StoredArray { shape: vec![3], data: vec![1.0, 2.0, 3.0] });
        for i in 0..16 {
            s.metadata.insert(format!("key{i}"), format!("value {i}"));
        }
        let first = s.to_bytes().unwrap();
        assert!((0..8).all(|_| s.to_bytes().unwrap() == first));
        let n = u64::from_le_bytes(first[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        let header = std::str::from_utf8(&first[8..8 + n]).unwrap();
        assert!(header.find("\"key0\"").unwrap() < header.find("\"key1\"").unwrap());
        assert_eq!(ArrayStore::from_bytes(&first, "t").unwrap(), s);
    }

    #[test]
    fn garbage_is_a_parse_error() {
        assert!(matches!(ArrayStore::from_bytes(b"nonsense", "x"), Err(Error::Parse { .. })));
    }
}
