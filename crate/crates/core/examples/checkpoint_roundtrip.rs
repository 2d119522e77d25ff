//! Adapter checkpoints: write, read back, and detect a flipped byte.

use pslora::checkpoint::{decode_adapters, encode_adapters};
use pslora::{LoraAdapter, Matrix};

fn main() -> pslora::Result<()> {
    let mut a = LoraAdapter::new(1, "fc1", (5, 4), 2, 7)?;
    a.set_factors(a.a().clone(), Matrix::from_fn(2, 4, |r, c| (r * 4 + c) as f32 * 0.1))?;
    let b = LoraAdapter::new(1, "fc2", (4, 3), 2, 8)?;
    let bytes = encode_adapters(&[a, b])?;
    println!(
        "{} bytes, magic {:?}",
        bytes.len(),
        std::str::from_utf8(&bytes[..4]).unwrap_or("?")
    );

    let back = decode_adapters(&bytes)?;
    let again = encode_adapters(&back)?;
    println!("re-encoded identically: {}", again == bytes);

    let mut bad = bytes.clone();
    bad[40] ^= 0x10;
    match decode_adapters(&bad) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("corrupted copy rejected: {e}"),
    }
    match decode_adapters(&bytes[..bytes.len() - 3]) {
        Ok(_) => println!("truncation went unnoticed"),
        Err(e) => println!("truncated copy rejected: {e}"),
    }
    Ok(())
}
