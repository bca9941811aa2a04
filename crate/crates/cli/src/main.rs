fn main() {
    std::process::exit(imu2emg_cli::run());
}
