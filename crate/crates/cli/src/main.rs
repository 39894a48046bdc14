use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match icosvm_cli::parse_args(std::env::args_os()) {
        Ok(cli) => icosvm_cli::run(cli),
        Err(e) => {
            if e.to_stdout {
                print!("{}", e.message);
            } else {
                eprint!("{}", e.message);
            }
            e.code
        }
    };
    ExitCode::from(code as u8)
}
