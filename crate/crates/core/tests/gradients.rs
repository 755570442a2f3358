mod common;

use common::*;
use idsynth::networks::{build_networks, ModelState, Net, Part};
use idsynth::nn::{AdamConfig, Stack};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mini_state(seed: u64) -> ModelState<f64> {
    build_networks(&mini_arch(), AdamConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn stacks(state: &ModelState<f64>, net: Net) -> Vec<Stack<f64>> {
    let parts: &[Part] = match net {
        Net::D => &[Part::DiscriminatorBody, Part::DiscriminatorHead],
        n => n.parts(),
    };
    parts.iter().map(|&p| state.part(p).clone()).collect()
}

fn check(net: Net) {
    let state = mini_state(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let input = match net {
        Net::G => random_tensor(&mut rng, &[4, state.config.latent_width()], 1.0),
        _ => random_tensor(&mut rng, &state.config.image_shape(4), 1.0),
    };
    let mut chain = stacks(&state, net);
    let c = check_chain(&mut rng, &mut chain, &input, 12);
    assert!(c.worst < 1e-4, "{net:?}: worst relative error {}", c.worst);
    assert!(c.kinks * 20 <= c.checked, "{net:?}: {} of {} coordinates on kinks", c.kinks, c.checked);
}

#[test]
fn identity_encoder_gradients() {
    check(Net::I);
}

#[test]
fn attribute_encoder_gradients() {
    check(Net::A);
}

#[test]
fn generator_gradients() {
    check(Net::G);
}

#[test]
fn classifier_gradients() {
    check(Net::C);
}

#[test]
fn discriminator_gradients() {
    check(Net::D);
}
