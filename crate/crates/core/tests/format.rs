use jif::format::{canonicalize, decode_jif, validate, JifImage};
use jif::testkit::{random_image, rng, ImageLimits};
use jif::{parse_jif, write_jif, JifError, PAGE_SIZE};
use proptest::prelude::*;
use rand::Rng;

fn small_limits() -> ImageLimits {
    ImageLimits {
        max_vmas: 6,
        max_pages: 1 << 12,
        max_private_pages: 32,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_parse_round_trip(seed in any::<u64>()) {
        let img = random_image(&mut rng(seed), small_limits());
        let bytes = write_jif(&img).unwrap();
        prop_assert_eq!(bytes.len() % PAGE_SIZE, 0);
        let parsed = parse_jif(&bytes).unwrap();
        prop_assert_eq!(&parsed, &img);
        prop_assert_eq!(write_jif(&parsed).unwrap(), bytes);
    }

    #[test]
    fn canonical_form_is_a_fixed_point(seed in any::<u64>()) {
        let img = random_image(&mut rng(seed), small_limits());
        let canon = canonicalize(&img).unwrap();
        prop_assert!(validate(&canon).is_empty());
        prop_assert_eq!(canonicalize(&canon).unwrap(), canon.clone());
        // canonicalization never changes what a page resolves to
        for vma in &img.vmas {
            for p in 0..vma.n_pages() {
                let addr = vma.vbegin + p * PAGE_SIZE as u64;
                let content = |img: &JifImage| match jif::overlay::resolve_page(img, addr).unwrap() {
                    jif::overlay::PageSource::Private { data_offset, eager_writable } => {
                        let o = data_offset as usize;
                        (Some(img.data[o..o + PAGE_SIZE].to_vec()), eager_writable, 0)
                    }
                    jif::overlay::PageSource::Shared { file_offset, .. } => (None, false, file_offset),
                    jif::overlay::PageSource::Zero => (None, false, u64::MAX),
                };
                prop_assert_eq!(content(&img), content(&canon));
            }
        }
    }
}

#[test]
fn empty_image_is_one_page() {
    let bytes = write_jif(&JifImage::empty()).unwrap();
    assert_eq!(bytes.len(), PAGE_SIZE);
    assert_eq!(&bytes[..4], b"wJIF");
    assert_eq!(parse_jif(&bytes).unwrap(), JifImage::empty());
}

#[test]
fn table_bit_flips_are_detected() {
    let mut rng = rng(7);
    let mut detected = 0;
    let trials = 1000;
    for trial in 0..trials {
        let img = random_image(&mut jif::testkit::rng(trial), small_limits());
        let mut bytes = write_jif(&img).unwrap();
        let bit = rng.random_range(0..img.tables_end() as usize * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        if parse_jif(&bytes).is_err() {
            detected += 1;
        }
    }
    assert!(detected >= 999, "{detected} of {trials} flips detected");
}

#[test]
fn truncation_and_magic() {
    let img = random_image(&mut rng(3), small_limits());
    let bytes = write_jif(&img).unwrap();
    for len in [0, 3, 20, 43] {
        assert!(matches!(
            decode_jif(&bytes[..len]),
            Err(JifError::TruncatedFile { .. })
        ));
    }
    let mut wrong = bytes.clone();
    wrong[0] = b'x';
    assert!(matches!(parse_jif(&wrong), Err(JifError::BadMagic { .. })));
    let unaligned = &bytes[..bytes.len() - 1];
    assert!(parse_jif(unaligned).is_err());
}
