#![allow(dead_code)]

pub mod oracles;

use fliplearn::classifier::{classifier_spec, ClassifierModel};
use fliplearn::fill::{build_background, BackgroundImage};
use fliplearn::imaging::{generate_phantom, Phantom, PhantomSampler};
use fliplearn::superpixel::{assign_traversal, seeds_segment, SeedsParams, SuperpixelMap};
use fliplearn_nn::Network;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Scene {
    pub phantom: Phantom,
    pub background: BackgroundImage,
    pub map: SuperpixelMap,
}

pub fn scene(seed: u64, params: SeedsParams) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = PhantomSampler::default();
    loop {
        let profile = sampler.profile(&mut rng);
        let spec = sampler.sample(&mut rng, &profile, 8);
        let Ok(phantom) = generate_phantom(&spec) else { continue };
        let background = build_background(&phantom.image, &phantom.bbox).unwrap();
        let region = phantom.image.crop(&phantom.bbox);
        let p = params.fit_to(region.width(), region.height());
        let map = assign_traversal(&seeds_segment(&region, &p).unwrap(), &phantom.bbox);
        return Scene {
            phantom,
            background,
            map,
        };
    }
}

pub fn random_model(seed: u64) -> ClassifierModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ClassifierModel::new(Network::new(classifier_spec(), &mut rng).unwrap()).unwrap()
}
