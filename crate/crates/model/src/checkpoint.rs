//! Binary checkpoints: config, vocabularies and named f64 tensors.
//!
//! Layout (little endian): magic, u32 version, then length-prefixed config
//! JSON, the text, graph and action vocabulary files, a u32 tensor count and
//! per tensor its name, u32 rows, u32 cols and raw f64 values.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use worldkit_core::sos::{SosError, Vocabulary};

use crate::config::ModelConfig;
use crate::features::Vocabs;
use crate::network::{ModelError, WorldModel};
use crate::params::Parameters;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"WKCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("bad config: {0}")]
    Config(#[from] serde_json::Error),
    #[error(transparent)]
    Vocab(#[from] SosError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn put_bytes(w: &mut impl Write, b: &[u8]) -> io::Result<()> {
    w.write_all(&(b.len() as u64).to_le_bytes())?;
    w.write_all(b)
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read) -> Result<Vec<u8>, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let n = u64::from_le_bytes(b);
    if n > 1 << 32 {
        return Err(CheckpointError::Malformed(format!("field of {n} bytes")));
    }
    let mut out = vec![0u8; n as usize];
    r.read_exact(&mut out)?;
    Ok(out)
}

fn get_string(r: &mut impl Read) -> Result<String, CheckpointError> {
    String::from_utf8(get_bytes(r)?).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

pub fn write_model(w: &mut impl Write, m: &WorldModel) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    put_bytes(w, serde_json::to_string(&m.config)?.as_bytes())?;
    for v in [&m.vocabs.text, &m.vocabs.graph, &m.vocabs.action] {
        put_bytes(w, v.to_file_string().as_bytes())?;
    }
    w.write_all(&(m.params.len() as u32).to_le_bytes())?;
    for (name, t) in m.params.names().iter().zip(m.params.tensors()) {
        put_bytes(w, name.as_bytes())?;
        w.write_all(&(t.rows as u32).to_le_bytes())?;
        w.write_all(&(t.cols as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(t.data.len() * 8);
        t.data.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<WorldModel, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config: ModelConfig = serde_json::from_str(&get_string(r)?)?;
    let text = Vocabulary::from_file_str(&get_string(r)?)?;
    let graph = Vocabulary::from_file_str(&get_string(r)?)?;
    let action = Vocabulary::from_file_str(&get_string(r)?)?;
    let count = get_u32(r)? as usize;
    let mut params = Parameters::new();
    for _ in 0..count {
        let name = get_string(r)?;
        let rows = get_u32(r)? as usize;
        let cols = get_u32(r)? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n <= 1 << 30)
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` of {rows}x{cols}")))?;
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if params.id(&name).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor `{name}`")));
        }
        params.add(&name, Mat::from_vec(rows, cols, data));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(WorldModel::from_parts(config, Vocabs { text, graph, action }, params)?)
}

pub fn save(path: &Path, m: &WorldModel) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_model(&mut buf, m)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<WorldModel, CheckpointError> {
    let bytes = fs::read(path)?;
    read_model(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Task;
    use crate::features::encoder_inputs;
    use crate::network::tests::tiny_setup;

    #[test]
    fn reload_gives_identical_outputs() {
        let (mut m, samples) = tiny_setup(71);
        // Move away from the seeded init so a silent re-init would show.
        m.params.get_mut(0).data[3] += 0.5;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &m).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.vocabs, m.vocabs);
        assert_eq!(back.params, m.params);
        let x = encoder_inputs(&samples[0], &m.vocabs, &m.config).unwrap();
        let (a, b) = (m.encode(&x), back.encode(&x));
        let bits = |x: &Mat| x.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.state), bits(&b.state));
        let (ma, mb) = (m.memory(Task::Graph, &a), back.memory(Task::Graph, &b));
        assert_eq!(bits(&ma), bits(&mb));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (m, _) = tiny_setup(72);
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(&mut bad.as_slice()), Err(CheckpointError::Magic)));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(read_model(&mut bad.as_slice()), Err(CheckpointError::Version(9))));
        let short = &buf[..buf.len() - 4];
        assert!(matches!(read_model(&mut &short[..]), Err(CheckpointError::Io(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_model(&mut long.as_slice()), Err(CheckpointError::Malformed(_))));
    }
}
