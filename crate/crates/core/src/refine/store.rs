//! Session directory: `manifest.txt` of `key = value` lines plus one wire-format
//! file per parameter ciphertext.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use super::{load_base_model, Session, TeeLink};
use crate::error::{Error, Result};
use crate::forward::{encrypt_model, EncryptedModel};
use crate::geometry::CnnConfig;
use crate::lhe::{Ciphertext, Evaluator};
use crate::meter::OpMeter;
use crate::oracle::PlainModel;
use crate::plan::{NetworkPlan, RMode};

pub const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "lhecnn-session/1";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Per-layer labels and ciphertext counts in [`EncryptedModel::ciphertexts`] order.
fn layer_files(plan: &NetworkPlan, model: &EncryptedModel) -> Vec<(String, String, usize)> {
    let conv = model.filters.iter().enumerate().map(|(l, f)| (plan.conv_scope(l), f.packing.tag().to_string(), f.cts.len()));
    let fc = model.weights.iter().enumerate().map(|(l, w)| (plan.fc_scope(l), w.kind.tag().to_string(), w.cts.len()));
    conv.chain(fc).collect()
}

/// Writes the session's encrypted model. Existing ciphertext files in `dir`
/// are overwritten; the manifest is written last.
pub fn save_session(session: &Session, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let plan = session.plan();
    let params = session.params();
    let mut m = String::new();
    let _ = writeln!(m, "format = {FORMAT}");
    let _ = writeln!(m, "config = {}", serde_json::to_string(&plan.cfg).expect("config serializes"));
    let _ = writeln!(m, "slots = {}", params.slot_count());
    let _ = writeln!(m, "levels = {}", params.max_level());
    let _ = writeln!(m, "noise_sigma = {}", params.noise_sigma());
    let _ = writeln!(m, "key_id = {:#018x}", session.public_key().key_id().raw());
    let _ = writeln!(m, "r = {}", plan.r);
    let _ = writeln!(m, "packings = {}", join(&plan.packings.iter().map(|p| p.tag()).collect::<Vec<_>>()));
    let _ = writeln!(m, "kernel_sides = {}", join(&plan.geo.kernel_sides));
    let _ = writeln!(m, "strides = {}", join(&plan.geo.strides));
    let _ = writeln!(m, "grid_side = {}", plan.geo.grid_side);
    let _ = writeln!(m, "rounds = {}", session.rounds_done());
    let mut cts = session.model().ciphertexts();
    for (label, tag, count) in layer_files(plan, session.model()) {
        let _ = writeln!(m, "layer.{label} = {tag} {count}");
        for i in 0..count {
            let name = format!("{label}-{i:05}.ct");
            std::fs::write(dir.join(&name), cts.next().expect("counted").to_bytes())?;
            let _ = writeln!(m, "ct.{label}.{i:05} = {name}");
        }
    }
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    std::fs::write(&tmp, m)?;
    std::fs::rename(tmp, dir.join(MANIFEST))?;
    Ok(())
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("manifest line {}: expected key = value", i + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Format(format!("manifest line {}: duplicate key {}", i + 1, k.trim())));
        }
    }
    Ok(out)
}

fn field<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("manifest lacks {key}")))
}

fn num<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
    field(m, key)?.parse().map_err(|_| Error::Format(format!("manifest {key} is not a number")))
}

/// Reads the configuration recorded in a session directory.
pub fn session_config(dir: impl AsRef<Path>) -> Result<CnnConfig> {
    let m = parse_manifest(&std::fs::read_to_string(dir.as_ref().join(MANIFEST))?)?;
    let cfg: CnnConfig = serde_json::from_str(field(&m, "config")?).map_err(|e| Error::Format(format!("manifest config: {e}")))?;
    CnnConfig::new(cfg.conv().to_vec(), cfg.fc().to_vec(), cfg.n())
}

/// Opens a saved session against a TEE holding the matching key.
pub fn load_session(dir: impl AsRef<Path>, tee: Arc<dyn TeeLink>) -> Result<Session> {
    let dir = dir.as_ref();
    let m = parse_manifest(&std::fs::read_to_string(dir.join(MANIFEST))?)?;
    if field(&m, "format")? != FORMAT {
        return Err(Error::Format(format!("unsupported session format {}", field(&m, "format")?)));
    }
    let cfg = session_config(dir)?;
    let pk = tee.public_key();
    let params = pk.params();
    if num::<usize>(&m, "slots")? != params.slot_count() || num::<u32>(&m, "levels")? != params.max_level() {
        return Err(Error::Config("session was saved under different encryption parameters".into()));
    }
    let key =
        u64::from_str_radix(field(&m, "key_id")?.trim_start_matches("0x"), 16).map_err(|_| Error::Format("manifest key_id".into()))?;
    if key != pk.key_id().raw() {
        return Err(Error::Lhe(crate::error::LheError::KeyMismatch { expected: pk.key_id().raw(), actual: key }));
    }
    let plan = NetworkPlan::new(&cfg, params, RMode::Fixed(num(&m, "r")?))?;
    // layer structure comes from the plan; only the ciphertexts are read back
    let scratch = Evaluator::new(pk.clone(), Arc::new(OpMeter::new()));
    let mut model = encrypt_model(&scratch, &plan, &PlainModel::zeros(&cfg))?;
    let mut loaded = Vec::new();
    for (label, tag, count) in layer_files(&plan, &model) {
        let want = format!("{tag} {count}");
        let got = field(&m, &format!("layer.{label}"))?;
        if got != want {
            return Err(Error::Layout { expected: format!("{label} {want}"), actual: got.to_string() });
        }
        for i in 0..count {
            let name = field(&m, &format!("ct.{label}.{i:05}"))?;
            if name.contains('/') || name.contains('\\') {
                return Err(Error::Format(format!("ciphertext file name {name:?}")));
            }
            let bytes = std::fs::read(dir.join(name))?;
            loaded.push(Ciphertext::from_bytes(&bytes, pk.key_id(), params.max_level())?);
        }
    }
    let mut it = loaded.into_iter();
    for c in model.filters.iter_mut().flat_map(|f| f.cts.iter_mut()).chain(model.weights.iter_mut().flat_map(|w| w.cts.iter_mut())) {
        *c = it.next().expect("one ciphertext per slot");
    }
    let mut session = load_base_model(tee, &cfg, RMode::Fixed(plan.r), model)?;
    session.rounds_done = num(&m, "rounds")?;
    Ok(session)
}
