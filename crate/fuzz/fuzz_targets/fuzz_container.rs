#![no_main]

use libfuzzer_sys::fuzz_target;

use cdma::container::{
    classifier_from_container, dataset_from_container, denoiser_from_container,
    pairs_from_container, Container,
};

fuzz_target!(|data: &[u8]| {
    let Ok(container) = Container::from_bytes(data) else {
        return;
    };
    // A successful parse must round-trip byte-identically.
    let bytes = container.to_bytes();
    let again = Container::from_bytes(&bytes).expect("reparse of rendered container");
    assert_eq!(container.role, again.role);
    assert_eq!(container.tensors.len(), again.tensors.len());
    assert_eq!(bytes, again.to_bytes());

    // Typed loads may reject the payload but must never panic.
    let _ = classifier_from_container(&container);
    let _ = denoiser_from_container(&container);
    let _ = dataset_from_container(&container);
    let _ = pairs_from_container(&container);
});
