"""
运行脚本
快速执行环境检查、演示流水线、测试与系统验证
"""

import subprocess
import sys
from pathlib import Path

TOY_CONFIG = Path("data/configs/toy.conf")


def check_requirements():
    """检查环境要求"""
    print("🔍 检查环境要求...")

    if sys.version_info < (3, 9):
        print("❌ 需要Python 3.9或更高版本")
        return False

    print(f"✅ Python版本: {sys.version}")

    if not Path("requirements.txt").exists():
        print("❌ 未找到requirements.txt文件")
        return False

    missing = []
    for module in ("numpy", "scipy", "pandas", "pydantic", "sqlalchemy", "dotenv"):
        try:
            __import__(module)
        except ImportError:
            missing.append(module)
    if missing:
        print(f"❌ 缺少依赖: {', '.join(missing)}，请运行 pip install -r requirements.txt")
        return False

    print("✅ 依赖检查通过")

    if not Path(".env").exists():
        print("⚠️ 未找到.env文件，将使用默认设置 (可复制.env.example)")
    return True


def gce(*args):
    """调用命令行入口，返回退出码"""
    from gcerec.main import main as gce_main
    return gce_main(list(args))


def run_demo(config=TOY_CONFIG):
    """在玩具数据集上依次执行 ingest → train → eval"""
    print("🧪 演示流水线 (玩具数据集)")
    print("=" * 60)

    if not check_requirements():
        return False

    for step in (["ingest"], ["train", "--deterministic"], ["eval"]):
        print(f"\n▶️ gce {step[0]} --config {config}")
        code = gce(step[0], "--config", str(config), *step[1:])
        if code != 0:
            print(f"❌ {step[0]} 失败 (退出码 {code})")
            return False

    print("\n🎉 演示完成！")
    return True


def run_test():
    """运行测试"""
    print("🧪 运行测试套件...")

    try:
        result = subprocess.run([
            sys.executable, "-m", "pytest",
            "tests/", "-v", "--tb=short"
        ], capture_output=True, text=True)

        print(result.stdout)
        if result.stderr:
            print("错误信息:")
            print(result.stderr)

        return result.returncode == 0
    except Exception as e:
        print(f"❌ 测试运行失败: {e}")
        return False


def run_validate(skip_timing=False):
    """运行系统验证"""
    print("🔍 运行系统验证...")
    args = ["validate", "--skip-timing"] if skip_timing else ["validate"]
    return gce(*args) == 0


def show_help():
    """显示帮助信息"""
    print("""
📊 GCE 上下文感知推荐 - 运行脚本

用法: python run.py <命令>

命令:
  check     - 检查运行环境
  demo      - 在玩具数据集上运行 ingest / train / eval
  test      - 运行测试套件
  validate  - 运行系统验证 (加 --quick 跳过复杂度测量)
  help      - 显示此帮助信息

示例:
  python run.py demo
  python run.py validate --quick
  python -m gcerec train --config data/configs/ml100k.conf

注意:
- 完整命令行见 python -m gcerec --help
- 环境变量见 .env.example
    """)


def main():
    """主函数"""
    if len(sys.argv) < 2:
        show_help()
        return

    command = sys.argv[1].lower()

    if command == "check":
        sys.exit(0 if check_requirements() else 1)
    elif command == "demo":
        sys.exit(0 if run_demo() else 1)
    elif command == "test":
        sys.exit(0 if run_test() else 1)
    elif command == "validate":
        sys.exit(0 if run_validate("--quick" in sys.argv[2:]) else 1)
    elif command == "help":
        show_help()
    else:
        print(f"❌ 未知命令: {command}")
        show_help()
        sys.exit(1)


if __name__ == "__main__":
    main()
