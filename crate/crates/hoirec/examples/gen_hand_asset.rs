//! Regenerate the bundled hand-proxy asset from the procedural builder.
//!
//! Run after changing the builder: cargo run -p hoirec --example gen_hand_asset

fn main() {
    let p = hoirec::scene::HandProxy::default_proxy();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../assets/hand_proxy.txt");
    std::fs::write(path, p.to_asset_string()).expect("write asset");
    println!(
        "wrote {} ({} vertices, {} faces)",
        path,
        p.vertex_count(),
        p.face_count()
    );
}
