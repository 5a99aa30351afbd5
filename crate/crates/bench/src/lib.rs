//! Shared fixtures for the criterion benches.

use std::sync::Arc;

use lhecnn::config::{Parity, SynthSpec};
use lhecnn::geometry::preset;
use lhecnn::oracle::PlainModel;
use lhecnn::plan::NetworkPlan;
use lhecnn::refine::{load_base_model, DataProvider, EncryptedBatch, ModelProvider, Session, TeeLink};
use lhecnn::tee::TeeService;
use lhecnn::LheParams;

pub struct Fixture {
    pub tee: Arc<TeeService>,
    pub session: Session,
    pub batch: EncryptedBatch,
}

/// A session on `name` with one encrypted batch of synthetic images.
pub fn fixture(name: &str) -> Fixture {
    let p = preset(name).expect("known preset");
    let tee = Arc::new(TeeService::with_seed(LheParams::new(p.slots, p.levels).unwrap(), 3));
    tee.attest_and_provision("ree");
    let link: Arc<dyn TeeLink> = Arc::new(tee.handle("ree").unwrap());
    let mode = lhecnn::plan::RMode::Auto;
    let plan = NetworkPlan::new(&p.cfg, tee.params(), mode).unwrap();
    let model = ModelProvider::new(tee.public_key()).encrypt(&plan, &PlainModel::init(&p.cfg, 1)).unwrap();
    let session = load_base_model(link, &p.cfg, mode, model).unwrap();
    let data = SynthSpec::for_config(&p.cfg, 0).sample(p.cfg.n(), Parity::Odd, 1);
    let batch = DataProvider::new(tee.public_key()).encrypt_batch(session.plan(), &data.images, &data.labels).unwrap();
    Fixture { tee, session, batch }
}
