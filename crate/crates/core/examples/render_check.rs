fn main() {
    for idx in 0..3u64 {
        let t = vton_core::synth::make_triplet(7, idx, 256, 192).unwrap();
        t.source_image.save_png(format!("/tmp/src{idx}.png")).unwrap();
        t.target_image.save_png(format!("/tmp/tgt{idx}.png")).unwrap();
        t.clothes_image.save_png(format!("/tmp/cl{idx}.png")).unwrap();
        println!("triplet {idx}: pattern {} bucket {}", t.pattern_id, t.target_pose_bucket);
    }
    let t = vton_core::synth::make_triplet(7, 0, 64, 48).unwrap();
    t.source_image.save_png("/tmp/small.png").unwrap();
}
