use std::io::{Read, Write};
use std::os::unix::net::UnixStream;
use std::sync::Arc;

use super::*;
use crate::lhe::{Evaluator, LheParams};
use crate::meter::OpMeter;
use crate::packing::FeatureMap;

fn tee(s: usize, l: u32) -> Arc<TeeService> {
    Arc::new(TeeService::with_seed(LheParams::new(s, l).unwrap(), 21))
}

fn ev(t: &TeeService) -> Evaluator {
    Evaluator::new(t.public_key(), Arc::new(OpMeter::new()))
}

fn enc(t: &TeeService, v: Vec<f64>) -> Ciphertext {
    t.public_key().encrypt(&Plaintext::new(v)).unwrap()
}

fn open(t: &TeeService, c: &Ciphertext) -> Vec<f64> {
    t.decrypt_for("owner", std::slice::from_ref(c)).unwrap().remove(0)
}

#[test]
fn attestation_registry() {
    let t = tee(8, 4);
    assert_eq!(t.registry_len(), 0);
    t.attest_and_provision("model-provider");
    assert_eq!(t.registry_len(), 1);
    t.attest_and_provision("model-provider");
    assert_eq!(t.registry_len(), 1);
    assert!(t.is_attested("model-provider"));
    let c = enc(&t, vec![1.0; 8]);
    assert!(matches!(t.reencrypt_batch("stranger", std::slice::from_ref(&c)), Err(Error::Tee(_))));
    assert!(t.handle("stranger").is_err());
    assert!(t.handle("model-provider").is_ok());
    assert_eq!(t.counters().reencrypted, 0);
}

#[test]
fn reencrypt_batch_resets_levels_and_counts_bytes() {
    let t = tee(8, 6);
    t.attest_and_provision("p");
    t.attest_and_provision("owner");
    let e = ev(&t);
    let a = enc(&t, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    let mut low = a.clone();
    for _ in 0..5 {
        low = e.mul(&low, &enc(&t, vec![1.0; 8])).unwrap();
    }
    let mid = e.mul(&e.mul(&a, &a).unwrap(), &enc(&t, vec![1.0; 8])).unwrap();
    assert_eq!((mid.level(), low.level()), (3, 0));
    let before = t.counters();
    let out = t.reencrypt_batch("p", &[mid, low]).unwrap();
    assert!(out.iter().all(|c| c.level() == 5));
    let d = t.counters().since(&before);
    assert_eq!(d.reencrypted, 2);
    assert_eq!(d.reencrypt_calls, 1);
    assert_eq!(d.bytes_in, 2 * (16 + 8 * 8));
    assert_eq!(d.bytes_out, 2 * (16 + 8 * 8));
    assert_eq!(open(&t, &out[1]), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    let before = t.counters();
    assert!(t.reencrypt_batch("p", &[]).unwrap().is_empty());
    assert_eq!(t.counters(), before);
}

fn type2_logits(t: &TeeService, rows: &[Vec<f64>], n: usize) -> PackedTensor {
    let s = t.params().slot_count();
    let classes = rows[0].len();
    let cts = (0..classes)
        .map(|w| {
            let mut v = vec![0.0; s];
            for b in 0..s / n {
                for (j, r) in rows.iter().enumerate() {
                    v[b * n + j] = r[w];
                }
            }
            enc(t, v)
        })
        .collect();
    PackedTensor::new(TensorLayout::Type2 { features: classes, n }, cts).unwrap()
}

#[test]
fn loss_head_closed_forms() {
    let t = tee(8, 4);
    t.attest_and_provision("p");
    t.attest_and_provision("owner");
    let n = 2;
    let logits = type2_logits(&t, &[vec![2f64.ln(), 0.0], vec![0.5, 0.5]], n);
    let labels = enc(&t, label_vector(&[0, 1], n, 8).unwrap().into_vec());
    let out = t.loss_head("p", &logits, &labels, 2, None).unwrap();
    assert_eq!(out.batch, 2);
    assert!(out.grads.cts.iter().all(|c| c.level() == 3));
    let g0 = open(&t, &out.grads.cts[0]);
    let g1 = open(&t, &out.grads.cts[1]);
    // image 0: softmax (2/3, 1/3), label 0; image 1: uniform, label 1
    assert!((g0[0] + 1.0 / 3.0).abs() < 1e-12 && (g1[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((g0[1] - 0.5).abs() < 1e-12 && (g1[1] + 0.5).abs() < 1e-12);
    // replicated in every block
    assert_eq!(g0[6], g0[0]);
    assert_eq!(g1[7], g1[1]);
    let want = ((1.5f64).ln() + 2f64.ln()) / 2.0;
    assert!((out.loss - want).abs() < 1e-12);
    let c = t.counters();
    assert_eq!((c.loss_head_calls, c.loss_head_outputs), (1, 2));
    assert_eq!(c.level_resets(), 2);
}

#[test]
fn loss_head_confident_and_normalized() {
    let t = tee(16, 4);
    t.attest_and_provision("p");
    t.attest_and_provision("owner");
    let n = 4;
    let rows = vec![vec![50.0, 0.0, 0.0], vec![0.2, -1.0, 3.0], vec![1.0, 1.0, 1.0]];
    let logits = type2_logits(&t, &rows, n);
    let labels = enc(&t, label_vector(&[0, 2, 1], n, 16).unwrap().into_vec());
    let out = t.loss_head("p", &logits, &labels, 3, Some(1)).unwrap();
    assert_eq!(out.batch, 3);
    assert!(out.grads.cts.iter().all(|c| c.level() == 1));
    let g: Vec<Vec<f64>> = out.grads.cts.iter().map(|c| open(&t, c)).collect();
    for j in 0..3 {
        let s: f64 = (0..3).map(|w| g[w][j]).sum();
        assert!(s.abs() < 1e-12);
    }
    // the empty fourth image slot carries no gradient
    assert!((0..3).all(|w| g[w][3] == 0.0));
    assert!((g[1][2] - (1.0 / 3.0 - 1.0)).abs() < 1e-12);
    let confident = type2_logits(&t, &[vec![60.0, 0.0, 0.0]], n);
    let l0 = enc(&t, label_vector(&[0], n, 16).unwrap().into_vec());
    assert!(t.loss_head("p", &confident, &l0, 3, None).unwrap().loss < 1e-20);
}

#[test]
fn loss_head_type1_layout_and_label_range() {
    let t = tee(8, 4);
    t.attest_and_provision("p");
    t.attest_and_provision("owner");
    let n = 2;
    // 3 logits contiguous over 4 blocks of one ciphertext
    let c = enc(&t, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 9.0, 9.0]);
    let logits = PackedTensor::new(TensorLayout::Type1 { map: FeatureMap::contiguous(3, 4), n }, vec![c]).unwrap();
    let labels = enc(&t, label_vector(&[1, 2], n, 8).unwrap().into_vec());
    let out = t.loss_head("p", &logits, &labels, 3, None).unwrap();
    let g = open(&t, &out.grads.cts[0]);
    assert!((g[0] - 1.0 / 3.0).abs() < 1e-12 && (g[2] + 2.0 / 3.0).abs() < 1e-12);
    assert!((g[1] - 1.0 / 3.0).abs() < 1e-12 && (g[5] + 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(&g[6..], &[0.0, 0.0]);
    let bad = enc(&t, vec![3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(matches!(t.loss_head("p", &logits, &bad, 3, None), Err(Error::Tee(_))));
}

#[test]
fn meter_records_tee_primitives() {
    let meter = Arc::new(OpMeter::new());
    let t = TeeService::with_seed(LheParams::new(8, 4).unwrap(), 2).with_meter(meter.clone());
    t.attest_and_provision("p");
    let c = t.public_key().encrypt(&Plaintext::new(vec![0.0; 8])).unwrap();
    t.reencrypt_batch("p", &[c.clone(), c]).unwrap();
    let snap = meter.snapshot();
    assert_eq!(snap.scope_count(TEE_SCOPE, OpKind::Reencrypt), 2);
}

#[test]
fn socket_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tee.sock");
    let t = tee(8, 4);
    let server = SocketServer::bind(t.clone(), &path).unwrap();
    let client = TeeClient::connect(server.path(), "remote").unwrap();
    assert!(t.is_attested("remote"));
    assert_eq!(client.public_key().key_id(), t.public_key().key_id());
    let e = Evaluator::new(client.public_key().clone(), Arc::new(OpMeter::new()));
    let a = e.encrypt_slots(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
    let low = e.mul(&a, &a).unwrap();
    let out = client.reencrypt_batch(&[low]).unwrap();
    assert_eq!(out[0].level(), 3);
    t.attest_and_provision("owner");
    assert_eq!(open(&t, &out[0])[2], 9.0);
    let logits = type2_logits(&t, &[vec![2f64.ln(), 0.0]], 2);
    let labels = e.encrypt_slots(label_vector(&[0], 2, 8).unwrap().into_vec()).unwrap();
    let lh = client.loss_head(&logits, &labels, 2, None).unwrap();
    assert_eq!(lh.batch, 1);
    assert!((open(&t, &lh.grads.cts[0])[0] + 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(t.counters().loss_head_outputs, 2);
    drop(client);
    drop(server);
    assert!(!path.exists());
}

fn frame(op: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = ((payload.len() + 1) as u32).to_le_bytes().to_vec();
    out.push(op);
    out.extend_from_slice(payload);
    out
}

fn reply(s: &mut UnixStream) -> (u8, Vec<u8>) {
    let mut len = [0u8; 4];
    s.read_exact(&mut len).unwrap();
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    s.read_exact(&mut buf).unwrap();
    (buf[0], buf[1..].to_vec())
}

#[test]
fn socket_rejects_unattested_and_unknown_requests() {
    let t = tee(8, 4);
    let (mut a, b) = UnixStream::pair().unwrap();
    let tc = t.clone();
    let server = std::thread::spawn(move || serve_connection(&tc, b));
    a.write_all(&frame(0x01, &0u32.to_le_bytes())).unwrap();
    let (op, msg) = reply(&mut a);
    assert_eq!(op, 0xFF);
    assert!(String::from_utf8(msg).unwrap().contains("not attested"));
    a.write_all(&frame(0x03, b"x")).unwrap();
    assert_eq!(reply(&mut a).0, 0x03);
    a.write_all(&frame(0x7E, &[])).unwrap();
    assert_eq!(reply(&mut a).0, 0xFF);
    // truncated ciphertext list
    a.write_all(&frame(0x01, &1u32.to_le_bytes())).unwrap();
    assert_eq!(reply(&mut a).0, 0xFF);
    a.write_all(&frame(0x01, &0u32.to_le_bytes())).unwrap();
    assert_eq!(reply(&mut a), (0x01, 0u32.to_le_bytes().to_vec()));
    drop(a);
    server.join().unwrap().unwrap();
}
