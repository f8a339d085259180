//! Bank file format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      "A2RB"
//! version    u32 = 1
//! class_id   u32
//! patch_size u16
//! stride     u16
//! dim        u32
//! count      u64
//! flags      u32   bit0 quantized, bit1 pca, bit2 index
//! mean       dim × f32
//! [pca]      u32 input_dim, u32 output_dim, input_dim × f32 mean,
//!            output_dim·input_dim × f32 components
//! [quant]    dim × f32 lo, dim × f32 hi
//! payload    count·dim × f32 (raw) or count·dim × u8 (quantized)
//! [index]    u32 n_list, u32 search_dim, u32 nprobe, u64 seed, u32 bank_ref,
//!            n_list·search_dim × f32 centroids,
//!            n_list × (u32 len, len × u32 ids)
//! crc32      u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::ann::AnnIndex;
use crate::bank::{MemoryBank, PcaModel, QuantParams, Storage};
use crate::cxloss::{BankSet, IndexedBank};
use crate::error::{Error, Result};
use crate::imaging::ScaleSpec;

pub const BANK_MAGIC: [u8; 4] = *b"A2RB";
pub const BANK_VERSION: u32 = 1;

const FLAG_QUANTIZED: u32 = 1;
const FLAG_PCA: u32 = 1 << 1;
const FLAG_INDEX: u32 = 1 << 2;

/// Contents of a bank file.
#[derive(Debug, Clone)]
pub struct BankFile {
    pub bank: MemoryBank,
    pub index: Option<AnnIndex>,
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_bank(bank: &MemoryBank, index: Option<&AnnIndex>) -> Result<Vec<u8>> {
    let scale = bank.scale();
    let (Ok(patch), Ok(stride)) = (u16::try_from(scale.patch_size), u16::try_from(scale.stride))
    else {
        return Err(Error::invalid(format!(
            "scale {scale} does not fit the file header"
        )));
    };
    let mut flags = 0;
    if bank.is_quantized() {
        flags |= FLAG_QUANTIZED;
    }
    if bank.pca().is_some() {
        flags |= FLAG_PCA;
    }
    if index.is_some() {
        flags |= FLAG_INDEX;
    }

    let mut out = Vec::new();
    out.extend_from_slice(&BANK_MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    out.extend_from_slice(&bank.class_id().to_le_bytes());
    out.extend_from_slice(&patch.to_le_bytes());
    out.extend_from_slice(&stride.to_le_bytes());
    out.extend_from_slice(&(bank.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(bank.len() as u64).to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    put_f32s(&mut out, bank.mean());

    if let Some(p) = bank.pca() {
        out.extend_from_slice(&(p.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(p.output_dim as u32).to_le_bytes());
        put_f32s(&mut out, &p.mean);
        put_f32s(&mut out, &p.components);
    }
    match bank.storage() {
        Storage::Raw(v) => put_f32s(&mut out, v),
        Storage::Quantized { params, codes } => {
            put_f32s(&mut out, &params.lo);
            put_f32s(&mut out, &params.hi);
            out.extend_from_slice(codes);
        }
    }
    if let Some(index) = index {
        if index.bank_ref() != bank.fingerprint() {
            return Err(Error::IndexMismatch);
        }
        out.extend_from_slice(&(index.n_list() as u32).to_le_bytes());
        out.extend_from_slice(&(index.search_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(index.nprobe_default() as u32).to_le_bytes());
        out.extend_from_slice(&index.seed().to_le_bytes());
        out.extend_from_slice(&index.bank_ref().to_le_bytes());
        put_f32s(&mut out, &index.centroids);
        for list in index.lists() {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for id in list {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("{what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Truncated(what.to_string()))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_bank(bytes: &[u8]) -> Result<BankFile> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != BANK_MAGIC {
        return Err(Error::BadMagic {
            expected: BANK_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != BANK_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let class_id = r.u32("class id")?;
    let patch = usize::from(r.u16("patch size")?);
    let stride = usize::from(r.u16("stride")?);
    let scale = ScaleSpec::new(patch, stride)?;
    let dim = r.u32("dim")? as usize;
    if dim != scale.dim() {
        return Err(Error::DimensionMismatch {
            expected: scale.dim(),
            actual: dim,
        });
    }
    let count =
        usize::try_from(r.u64("count")?).map_err(|_| Error::Truncated("count overflows".into()))?;
    let flags = r.u32("flags")?;
    if flags & !(FLAG_QUANTIZED | FLAG_PCA | FLAG_INDEX) != 0 {
        return Err(Error::invalid(format!("unknown flags {flags:#x}")));
    }
    let mean = r.f32s(dim, "mean")?;

    let pca = if flags & FLAG_PCA != 0 {
        let input_dim = r.u32("pca input dim")? as usize;
        let output_dim = r.u32("pca output dim")? as usize;
        let pmean = r.f32s(input_dim, "pca mean")?;
        let components = r.f32s(input_dim.saturating_mul(output_dim), "pca components")?;
        Some(PcaModel {
            input_dim,
            output_dim,
            mean: pmean,
            components,
        })
    } else {
        None
    };

    let values = count
        .checked_mul(dim)
        .ok_or_else(|| Error::Truncated("payload size overflows".into()))?;
    let storage = if flags & FLAG_QUANTIZED != 0 {
        let lo = r.f32s(dim, "quantizer lo")?;
        let hi = r.f32s(dim, "quantizer hi")?;
        let codes = r.take(values, "payload")?.to_vec();
        Storage::Quantized {
            params: QuantParams { lo, hi },
            codes,
        }
    } else {
        Storage::Raw(r.f32s(values, "payload")?)
    };

    let index_parts = if flags & FLAG_INDEX != 0 {
        let n_list = r.u32("index n_list")? as usize;
        let search_dim = r.u32("index search dim")? as usize;
        let nprobe = r.u32("index nprobe")? as usize;
        let seed = r.u64("index seed")?;
        let bank_ref = r.u32("index bank ref")?;
        let centroids = r.f32s(n_list.saturating_mul(search_dim), "centroids")?;
        let mut lists = Vec::with_capacity(n_list.min(1 << 20));
        for _ in 0..n_list {
            let len = r.u32("list length")? as usize;
            let ids = r
                .take(len.saturating_mul(4), "list ids")?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            lists.push(ids);
        }
        Some((search_dim, centroids, lists, nprobe, seed, bank_ref))
    } else {
        None
    };

    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::invalid(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let bank = MemoryBank::from_parts(class_id, scale, mean, storage, pca)?;
    let index = match index_parts {
        Some((search_dim, centroids, lists, nprobe, seed, bank_ref)) => {
            if bank_ref != bank.fingerprint() {
                return Err(Error::IndexMismatch);
            }
            if lists.iter().flatten().any(|&id: &u32| id as usize >= count) {
                return Err(Error::invalid("index references ids beyond the bank"));
            }
            Some(AnnIndex::from_parts(
                search_dim, centroids, lists, nprobe, seed, bank_ref,
            )?)
        }
        None => None,
    };
    Ok(BankFile { bank, index })
}

pub fn save_bank_file(
    path: impl AsRef<Path>,
    bank: &MemoryBank,
    index: Option<&AnnIndex>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bank(bank, index)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_bank_file(path: impl AsRef<Path>) -> Result<BankFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bank(&bytes)
}

pub fn save_bank(bank: &MemoryBank, path: impl AsRef<Path>) -> Result<()> {
    save_bank_file(path, bank, None)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<MemoryBank> {
    load_bank_file(path).map(|f| f.bank)
}

/// Writes every bank of `set` with its index into `dir`.
pub fn save_bank_dir(dir: impl AsRef<Path>, set: &BankSet) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    set.iter()
        .map(|entry| {
            let path = dir.join(bank_file_name(entry.bank.class_id(), entry.bank.scale()));
            save_bank_file(&path, &entry.bank, Some(&entry.index))?;
            Ok(path)
        })
        .collect()
}

/// Loads every `.a2rb` file in `dir`. Banks stored without an index get one
/// trained with the default list count and `seed`.
pub fn load_bank_dir(dir: impl AsRef<Path>, seed: u64) -> Result<BankSet> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.extension().and_then(|e| e.to_str()) == Some("a2rb"));
    paths.sort();
    let mut set = BankSet::new();
    for path in paths {
        let BankFile { bank, index } = load_bank_file(&path)?;
        let entry = match index {
            Some(index) => IndexedBank { bank, index },
            None => IndexedBank::with_default_index(bank, seed)?,
        };
        if set.get(entry.bank.scale(), entry.bank.class_id()).is_some() {
            return Err(Error::invalid(format!(
                "duplicate bank for class {} at {}",
                entry.bank.class_id(),
                entry.bank.scale()
            )));
        }
        set.insert(entry);
    }
    Ok(set)
}

/// File name used for a bank inside a bank directory.
pub fn bank_file_name(class_id: u32, scale: ScaleSpec) -> String {
    format!("c{class_id}_s{}.a2rb", scale.patch_size)
}
